"""End-to-end experiment plumbing: scenes -> features -> training -> detections.

Everything here is in memory; :mod:`bayeslidar.cli` wraps the same steps
with file I/O. All randomness derives from one integer seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bev import BevConfig, encode_bev
from .evaluation import Detection, EvalSummary, nms, summarize
from .geometry import Box3D, BoxFitError, bev_iou, fit_box, vector_to_corners
from .nnet import Batch, Network, TrainConfig, fit
from .pointcloud import GROUND_Z, SceneSpec, Vehicle, simulate_scan
from .proposals import (
    ANCHOR_HEIGHT, ANCHOR_Z_CENTER, BACKGROUND, POSITIVE, Anchor, AnchorSet, RoiPooler,
    anchor_shapes, generate_anchors, match_targets, propose, rank_anchors,
)
from .uncertainty import build_report, mc_sample_batch

log = logging.getLogger(__name__)

MODES = ("non_bayesian", "epistemic", "aleatoric", "epistemic_aleatoric")


@dataclass(frozen=True)
class ModeSpec:
    aleatoric: bool  # log-variance head + attenuated loss
    mc_dropout: bool  # N dropout passes at test time


MODE_SPECS = {
    "non_bayesian": ModeSpec(False, False),
    "epistemic": ModeSpec(False, True),
    "aleatoric": ModeSpec(True, False),
    "epistemic_aleatoric": ModeSpec(True, True),
}


@dataclass
class SynthConfig:
    n_train: int = 200
    n_test: int = 50
    min_vehicles: int = 2
    max_vehicles: int = 6
    x_range: tuple[float, float] = (5.0, 85.0)
    y_range: tuple[float, float] = (-20.0, 20.0)
    length_range: tuple[float, float] = (3.6, 4.8)
    width_range: tuple[float, float] = (1.6, 1.95)
    height_range: tuple[float, float] = (1.4, 1.7)
    yaw_range: tuple[float, float] = (-0.5, 0.5)
    density_range: tuple[float, float] = (30.0, 60.0)
    noise_sigma: float = 0.05
    noisy_fraction: float = 0.2  # training scenes only
    noisy_sigma: float = 0.3
    clutter_density: float = 0.05
    min_gap: float = 0.5  # m of clearance between vehicle footprints


@dataclass
class ProposalConfig:
    stride: int = 8
    bins: int = 8
    top_k: int = 400
    min_density: float = 0.5
    nms_iou: float = 0.5  # 1.0 disables proposal NMS
    pos_iou: float = 0.5
    neg_iou: float = 0.35
    jitter_per_gt: int = 24  # extra training anchors scattered around each gt
    jitter_sigma: float = 0.6  # m, std of their center offsets
    neg_ratio: float = 3.0  # max background samples per positive, per scene


@dataclass
class DetectConfig:
    n_passes: int = 40
    nms_iou: float = 0.1  # synthetic vehicles never overlap in BEV


@dataclass
class SceneRecord:
    spec: SceneSpec
    split: str

    @property
    def scene_id(self) -> str:
        return self.spec.scene_id

    @property
    def gts(self) -> list[Box3D]:
        return [v.box for v in self.spec.vehicles]


@dataclass
class SceneFeatures:
    scene_id: str
    gts: list[Box3D]
    anchors: list[Anchor]
    features: np.ndarray  # (R, G*G*(M+2))


# --- scenes ----------------------------------------------------------------


def _inflate(b: Box3D, gap: float) -> Box3D:
    return Box3D(b.x, b.y, b.z, b.l + gap, b.w + gap, b.h, b.yaw)


def sample_vehicles(rng: np.random.Generator, cfg: SynthConfig, max_tries: int = 200) -> tuple[Vehicle, ...]:
    n = int(rng.integers(cfg.min_vehicles, cfg.max_vehicles + 1))
    placed: list[Vehicle] = []
    tries = 0
    while len(placed) < n and tries < max_tries:
        tries += 1
        l = rng.uniform(*cfg.length_range)
        w = rng.uniform(*cfg.width_range)
        h = rng.uniform(*cfg.height_range)
        box = Box3D(
            rng.uniform(*cfg.x_range), rng.uniform(*cfg.y_range), GROUND_Z + 0.5 * h,
            l, w, h, rng.uniform(*cfg.yaw_range),
        )
        grown = _inflate(box, cfg.min_gap)
        if any(bev_iou(grown, _inflate(v.box, cfg.min_gap)) > 0 for v in placed):
            continue
        placed.append(Vehicle(box, float(rng.uniform(*cfg.density_range))))
    return tuple(placed)


def make_scenes(cfg: SynthConfig, seed: int) -> list[SceneRecord]:
    """Train scenes first, then test scenes; ids are ``train_0000`` etc."""
    root = np.random.SeedSequence(seed)
    out = []
    for split, count, split_key in (("train", cfg.n_train, 0), ("test", cfg.n_test, 1)):
        n_noisy = int(round(cfg.noisy_fraction * count)) if split == "train" else 0
        for i in range(count):
            ss = np.random.SeedSequence(root.entropy, spawn_key=(split_key, i))
            rng = np.random.default_rng(ss)
            vehicles = sample_vehicles(rng, cfg)
            sigma = cfg.noisy_sigma if i < n_noisy else cfg.noise_sigma
            spec = SceneSpec(
                vehicles=vehicles,
                rng_seed=int(ss.generate_state(1, np.uint64)[0]),
                noise_sigma=sigma,
                clutter_density=cfg.clutter_density,
                scene_id=f"{split}_{i:04d}",
            )
            out.append(SceneRecord(spec, split))
    return out


# --- features --------------------------------------------------------------


def scene_proposals(grid, anchors: AnchorSet, cfg: ProposalConfig) -> list[Anchor]:
    """Density-ranked anchors thinned by greedy BEV NMS to ``top_k``."""
    if cfg.nms_iou >= 1.0:
        return propose(grid, anchors, cfg.top_k, cfg.min_density)
    idx, _ = rank_anchors(grid, anchors, cfg.min_density)
    if len(idx) == 0:
        return []
    c = anchors.centers[idx, :2]
    s = anchors.sizes[idx, :2]
    lo, hi = c - 0.5 * s, c + 0.5 * s
    area = s[:, 0] * s[:, 1]
    alive = np.ones(len(idx), dtype=bool)
    keep = []
    for i in range(len(idx)):
        if not alive[i]:
            continue
        keep.append(int(idx[i]))
        if len(keep) == cfg.top_k:
            break
        wh = np.clip(np.minimum(hi[i], hi) - np.maximum(lo[i], lo), 0.0, None)
        inter = wh[:, 0] * wh[:, 1]
        alive &= inter / (area[i] + area - inter) < cfg.nms_iou
    return [anchors[i] for i in keep]


def jittered_anchors(gts: list[Box3D], cfg: ProposalConfig, resolution: float, rng) -> list[Anchor]:
    """Anchor-shaped boxes scattered around each gt, standing in for RPN output."""
    shapes = anchor_shapes(resolution)
    out = []
    for g in gts:
        for _ in range(cfg.jitter_per_gt):
            l, w = shapes[int(rng.integers(len(shapes)))]
            dx, dy = rng.normal(0.0, cfg.jitter_sigma, 2)
            out.append(Anchor(Box3D(g.x + dx, g.y + dy, ANCHOR_Z_CENTER, l, w, ANCHOR_HEIGHT)))
    return out


class FeatureExtractor:
    """Scan -> BEV grid -> proposals -> pooled ROI features, one scene at a time."""

    def __init__(self, bev_cfg: BevConfig, prop_cfg: ProposalConfig):
        self.bev_cfg = bev_cfg
        self.cfg = prop_cfg
        self.anchors = generate_anchors(bev_cfg, prop_cfg.stride)

    @property
    def feature_size(self) -> int:
        return self.cfg.bins**2 * self.bev_cfg.channels

    def test_features(self, cloud, gts: list[Box3D], scene_id: str = "") -> SceneFeatures:
        grid = encode_bev(cloud, self.bev_cfg)
        props = scene_proposals(grid, self.anchors, self.cfg)
        feats = RoiPooler(grid, self.cfg.bins).pool(props)
        return SceneFeatures(scene_id, list(gts), props, feats)

    def training_samples(self, cloud, gts: list[Box3D], rng) -> Batch:
        """Labelled samples from proposals plus gt-jittered anchors.

        Background samples are subsampled to at most ``neg_ratio`` per
        positive; ignored anchors are dropped.
        """
        cfg = self.cfg
        grid = encode_bev(cloud, self.bev_cfg)
        gts = list(gts)
        anchors = scene_proposals(grid, self.anchors, cfg)
        anchors += jittered_anchors(gts, cfg, self.bev_cfg.resolution, rng)
        targets = match_targets(anchors, gts, cfg.pos_iou, cfg.neg_iou)
        lab = np.array([t.label for t in targets], dtype=np.int64)
        pos = np.flatnonzero(lab == POSITIVE)
        neg = np.flatnonzero(lab == BACKGROUND)
        n_neg = min(len(neg), int(math.ceil(cfg.neg_ratio * max(len(pos), 1))))
        if n_neg < len(neg):
            neg = np.sort(rng.choice(neg, n_neg, replace=False))
        keep = np.concatenate([pos, neg]).astype(np.int64)
        feats = RoiPooler(grid, cfg.bins).pool([anchors[i] for i in keep])
        offs = np.zeros((len(keep), 24))
        for row, i in enumerate(keep):
            if lab[i] == POSITIVE:
                offs[row] = targets[i].offsets
        return Batch(feats, lab[keep], offs)


def concat_batches(batches: list[Batch]) -> Batch:
    if not batches or sum(len(b) for b in batches) == 0:
        raise ValueError("no labelled samples")
    return Batch(
        np.concatenate([b.features for b in batches]),
        np.concatenate([b.labels for b in batches]),
        np.concatenate([b.offsets for b in batches]),
    )


def sample_rng(seed: int, scene_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3, scene_index)))


# --- models ----------------------------------------------------------------


def build_network(input_size: int, mode: str, hidden: tuple[int, ...], train_cfg: TrainConfig) -> Network:
    spec = MODE_SPECS[mode]
    return Network(
        input_size, hidden, aleatoric=spec.aleatoric,
        dropout_rate=train_cfg.dropout_rate, rng=train_cfg.rng_seed,
    )


def train_network(batch: Batch, mode: str, hidden: tuple[int, ...], train_cfg: TrainConfig, on_log=None):
    net = build_network(batch.features.shape[1], mode, hidden, train_cfg)
    rows, state = fit(net, batch, train_cfg, on_log=on_log)
    return net, rows, state


# --- detection -------------------------------------------------------------


def detect_scene(
    net: Network,
    scene: SceneFeatures,
    mode: str,
    cfg: DetectConfig,
    rng: np.random.Generator | None,
    keep_all: bool = False,
) -> list[Detection]:
    """Reports for every proposal, gated at vehicle probability > 0.5 and NMS'd.

    With ``keep_all`` the ungated, unsuppressed detections are returned.
    """
    if not scene.anchors:
        return []
    spec = MODE_SPECS[mode]
    n = cfg.n_passes if spec.mc_dropout else 1
    samples = mc_sample_batch(net, scene.features, scene.anchors, n, rng, dropout=spec.mc_dropout)
    dets = []
    for anchor, smp in zip(scene.anchors, samples):
        rep = build_report(smp, anchor)
        try:
            box = fit_box(vector_to_corners(rep.mean_box))
        except BoxFitError:
            continue
        dets.append(Detection(scene.scene_id, box, rep.veh_prob, rep, anchor))
    if keep_all:
        return dets
    return nms([d for d in dets if d.report.detected], cfg.nms_iou)


def detection_rng(seed: int, scene_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, scene_index)))


# --- benchmark -------------------------------------------------------------


# The stock schedule (1e-4 for 2000 steps) leaves the small benchmark far
# from converged; this is the schedule the benchmark actually uses.
DESK_TRAINING = dict(learning_rates=(1e-3, 1e-4), steps=(3000, 1000))


@dataclass
class BenchmarkConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    bev: BevConfig = field(default_factory=BevConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    train: TrainConfig = field(default_factory=lambda: replace(TrainConfig(), **DESK_TRAINING))
    detect: DetectConfig = field(default_factory=DetectConfig)
    hidden: tuple[int, ...] = (128, 128, 128)


@dataclass
class BenchmarkResult:
    seed: int
    summaries: dict[str, EvalSummary]
    detections: dict[str, list[Detection]]
    train_logs: dict[bool, list]


def run_benchmark(seed: int, cfg: BenchmarkConfig | None = None, modes=MODES) -> BenchmarkResult:
    """Synthesise, train and evaluate every requested mode for one seed.

    Modes that share a training objective (with or without the log-variance
    head) share one trained network; they differ only at inference.
    """
    cfg = cfg or BenchmarkConfig()
    scenes = make_scenes(cfg.synth, seed)
    fx = FeatureExtractor(cfg.bev, cfg.proposals)
    train = [s for s in scenes if s.split == "train"]
    test = [s for s in scenes if s.split == "test"]
    batch = concat_batches([
        fx.training_samples(simulate_scan(s.spec), s.gts, sample_rng(seed, i)) for i, s in enumerate(train)
    ])
    test_feats = [fx.test_features(simulate_scan(s.spec), s.gts, s.scene_id) for s in test]
    tcfg = replace(cfg.train, rng_seed=seed)
    nets, logs = {}, {}
    for aleatoric in sorted({MODE_SPECS[m].aleatoric for m in modes}):
        mode = "aleatoric" if aleatoric else "non_bayesian"
        nets[aleatoric], logs[aleatoric], _ = train_network(batch, mode, cfg.hidden, tcfg)
    gts = {f.scene_id: f.gts for f in test_feats}
    summaries, all_dets = {}, {}
    for mode in modes:
        net = nets[MODE_SPECS[mode].aleatoric]
        dets = []
        for i, sc in enumerate(test_feats):
            dets += detect_scene(net, sc, mode, cfg.detect, detection_rng(seed, i))
        all_dets[mode] = dets
        summaries[mode] = summarize(dets, gts)
    return BenchmarkResult(seed, summaries, all_dets, logs)

