"""Train a small detector and read its uncertainty reports.

Trains the aleatoric variant (with a log-variance head) on a handful of
synthetic scenes, then runs 40 dropout passes per proposal on a test scene
and prints what each estimator says about the detections. Takes about a
minute on one CPU core.

    python demos/02_uncertainty_of_one_detector.py
"""

from dataclasses import replace

from bayeslidar.evaluation import match_detections
from bayeslidar.nnet import TrainConfig
from bayeslidar.pipeline import (
    BenchmarkConfig, FeatureExtractor, concat_batches, detect_scene, detection_rng, make_scenes, sample_rng,
    train_network,
)
from bayeslidar.pointcloud import simulate_scan

SEED = 3
cfg = BenchmarkConfig()
synth = replace(cfg.synth, n_train=30, n_test=2)
records = make_scenes(synth, SEED)
train = [r for r in records if r.split == "train"]
test = [r for r in records if r.split == "test"]

fx = FeatureExtractor(cfg.bev, cfg.proposals)
batch = concat_batches([
    fx.training_samples(simulate_scan(r.spec), r.gts, sample_rng(SEED, i)) for i, r in enumerate(train)
])
print(f"{len(batch)} training samples ({int(batch.positive.sum())} positive) from {len(train)} scenes")

tcfg = replace(TrainConfig(), learning_rates=(1e-3, 1e-4), steps=(800, 200), log_every=200)
net, rows, _ = train_network(batch, "epistemic_aleatoric", (128, 128), tcfg)
# the regression term goes negative once the predicted log-variances drop below zero
for step, lr, total, cls, reg, decay in rows:
    print(f"  step {int(step):4d}  loss {total:8.3f}  (cls {cls:.3f}, reg {reg:.3f})")

scene = test[0]
feats = fx.test_features(simulate_scan(scene.spec), scene.gts, scene.scene_id)
dets = detect_scene(net, feats, "epistemic_aleatoric", cfg.detect, detection_rng(SEED, 0))
print(f"\ntest scene {scene.scene_id}: {len(scene.gts)} cars, {len(dets)} detections")
print("  dist   IoU   p(car)  entropy  mutual-inf  epistemic TV  aleatoric TV  occluded/facing")
for m in match_detections(dets, {scene.scene_id: scene.gts}):
    r = m.report
    ratio = r.occluded_sum / r.facing_sum
    print(f"  {m.distance:4.1f}  {m.iou:.2f}  {r.veh_prob:6.3f}  {r.se:7.4f}  {r.mi:10.5f}  {r.epistemic_tv_total:12.4f}"
          f"  {r.aleatoric_tv_total:12.4f}  {ratio:15.2f}")
