"""``bayeslidar`` command line: synth -> train -> detect -> analyze, plus selftest.

Exit codes: 0 success, 1 selftest failure, 2 configuration error,
3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .bev import GridBoundsError
from .config import ConfigError, RunConfig, default_config_text, load_config
from .dataio import DataError, Dataset, check_alignment, read_reports, write_dataset, write_reports
from .digest import MODE_LABELS, render_digest
from .evaluation import summarize, summary_rows, write_plots
from .nnet import ModelFormatError, NumericError, fit, load_model, save_model
from .pipeline import (
    MODE_SPECS, MODES, FeatureExtractor, build_network, concat_batches,
    detect_scene, detection_rng, make_scenes, sample_rng,
)
from .pointcloud import InvalidSceneError, PointFormatError, simulate_scan

log = logging.getLogger("bayeslidar")

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
LOG_COLUMNS = ("step", "lr", "total", "cls", "reg", "decay")


def _out(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --- commands --------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out_dir) -> dict:
    """Simulate every scene and write the dataset directory."""
    records = make_scenes(cfg.bench.synth, cfg.seed)
    clouds = [simulate_scan(r.spec) for r in records]
    manifest = write_dataset(records, clouds, _out(out_dir), cfg.seed, default_config_text(cfg))
    log.info("wrote %d train / %d test scenes to %s", len(manifest["train"]), len(manifest["test"]), out_dir)
    return manifest


def _write_log(path: Path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([int(r[0]), repr(float(r[1]))] + [repr(float(v)) for v in r[2:]])


def cmd_train(cfg: RunConfig, data_dir, out_dir) -> dict[str, Path]:
    """Train one network per selected mode on the dataset's training split.

    Each mode directory receives ``train_log.csv``, ``model_final.blnn`` and
    ``model_best.blnn`` (lowest logged total loss). On a non-finite loss the
    last logged parameters are saved as ``model_last_good.blnn`` and the
    numeric error is re-raised.
    """
    ds = Dataset(data_dir)
    fx = FeatureExtractor(cfg.bench.bev, cfg.bench.proposals)
    tcfg = cfg.train_config()
    batch = None
    if sum(tcfg.steps) > 0:
        ids = ds.scene_ids("train")
        samples = [fx.training_samples(ds.points(s), ds.gts[s], sample_rng(cfg.seed, i)) for i, s in enumerate(ids)]
        try:
            batch = concat_batches(samples)
        except ValueError:
            raise DataError("training split yields no labelled samples") from None
    out = {}
    for mode in cfg.modes:
        mdir = _out(Path(out_dir) / mode)
        net = build_network(fx.feature_size, mode, cfg.bench.hidden, tcfg)
        rows = []
        best = {"loss": float("inf"), "net": net.copy()}
        last_good = {"net": net.copy()}

        def on_log(row, cur):
            rows.append(row)
            last_good["net"] = cur.copy()
            if row[2] < best["loss"]:
                best["loss"], best["net"] = row[2], cur.copy()

        state = None
        try:
            if batch is not None:
                _, state = fit(net, batch, tcfg, on_log=on_log)
        except NumericError:
            _write_log(mdir / "train_log.csv", rows)
            save_model(last_good["net"], mdir / "model_last_good.blnn")
            raise
        _write_log(mdir / "train_log.csv", rows)
        save_model(net, mdir / "model_final.blnn", state)
        save_model(best["net"], mdir / "model_best.blnn")
        log.info("%s: %d log rows, final total loss %s", mode, len(rows), rows[-1][2] if rows else "n/a")
        out[mode] = mdir
    return out


def cmd_detect(cfg: RunConfig, data_dir, model_dir, out_dir, split: str = "test", checkpoint: str = "final"):
    """Proposals -> MC sampling -> gating and NMS, one report directory per mode."""
    ds = Dataset(data_dir)
    fx = FeatureExtractor(cfg.bench.bev, cfg.bench.proposals)
    ids = ds.scene_ids(split)
    for mode in cfg.modes:
        path = Path(model_dir) / mode / f"model_{checkpoint}.blnn"
        if not path.exists():
            raise DataError(f"missing model {path}")
        net, _ = load_model(path)
        spec = MODE_SPECS[mode]
        if net.aleatoric != spec.aleatoric:
            raise ConfigError(f"{path} {'has' if net.aleatoric else 'lacks'} a log-variance head; mode {mode} "
                              f"{'needs' if spec.aleatoric else 'forbids'} one")
        if net.input_size != fx.feature_size:
            raise ConfigError(f"{path} expects {net.input_size} features, config yields {fx.feature_size}")
        per_scene = {}
        for i, sid in enumerate(ids):
            feats = fx.test_features(ds.points(sid), ds.gts[sid], sid)
            per_scene[sid] = detect_scene(net, feats, mode, cfg.bench.detect, detection_rng(cfg.seed, i))
        header = {
            "mode": mode,
            "n_passes": cfg.bench.detect.n_passes if spec.mc_dropout else 1,
            "dropout": net.dropout_rate if spec.mc_dropout else 0.0,
            "seed": cfg.seed,
            "split": split,
            "model": path.name,
        }
        write_reports(_out(Path(out_dir) / mode), header, per_scene)
        log.info("%s: %d detections over %d scenes", mode, sum(map(len, per_scene.values())), len(ids))


def _report_dirs(root: Path) -> dict[str, Path]:
    if (root / "header.json").exists():
        mode = json.loads((root / "header.json").read_text()).get("mode", "unknown")
        return {mode: root}
    found = {m: root / m for m in MODES if (root / m / "header.json").exists()}
    if not found:
        raise DataError(f"no report directories under {root}")
    return found


def cmd_analyze(cfg: RunConfig, data_dir, report_dir, out_dir) -> dict:
    """summary.csv, SVG plots and digest.md for every report directory found."""
    ds = Dataset(data_dir)
    out = _out(out_dir)
    summaries = {}
    for mode, rdir in _report_dirs(Path(report_dir)).items():
        header, per_scene = read_reports(rdir)
        split = header.get("split", "test")
        ids = ds.scene_ids(split)
        check_alignment(per_scene, ids)
        check_alignment(header.get("scenes", []), ids)
        gts = {sid: ds.gts[sid] for sid in ids}
        dets = [d for sid in ids for d in per_scene[sid]]
        summaries[mode] = summarize(dets, gts)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["name", "key", "value"])
        for mode, s in summaries.items():
            w.writerows((f"{mode}.{name}", key, value) for name, key, value in summary_rows(s))
    for mode, s in summaries.items():
        write_plots(s, out, prefix=f"{mode}_")
    (out / "digest.md").write_text(render_digest(summaries))
    log.info("analyzed %s", ", ".join(MODE_LABELS.get(m, m) for m in summaries))
    return summaries


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="config file; flags override its values")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed")
    common.add_argument("--mode", choices=MODES, help="restrict to one detector mode (default: all)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-q", "--quiet", action="store_true", help="only print errors")

    p = argparse.ArgumentParser(prog="bayeslidar", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="simulate a dataset")
    t = sub.add_parser("train", parents=[common], help="train one model per mode")
    t.add_argument("--data", required=True, metavar="DIR")
    d = sub.add_parser("detect", parents=[common], help="write uncertainty reports")
    d.add_argument("--data", required=True, metavar="DIR")
    d.add_argument("--models", required=True, metavar="DIR", help="output directory of train")
    d.add_argument("--split", choices=("train", "test"), default="test")
    d.add_argument("--checkpoint", choices=("final", "best"), default="final")
    a = sub.add_parser("analyze", parents=[common], help="metrics, plots and digest")
    a.add_argument("--data", required=True, metavar="DIR")
    a.add_argument("--reports", required=True, metavar="DIR", help="output directory of detect")
    sub.add_parser("selftest", parents=[common], help="run the invariant checks")
    sub.add_parser("config", parents=[common], help="print the effective config file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config, seed=args.seed, mode=args.mode)
        if args.command == "config":
            sys.stdout.write(default_config_text(cfg))
            return EXIT_OK
        if args.command == "selftest":
            from . import selftest

            return EXIT_OK if selftest.run(cfg.seed) else EXIT_SELFTEST
        if args.out is None:
            raise ConfigError(f"{args.command} needs --out DIR")
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.out)
        elif args.command == "detect":
            cmd_detect(cfg, args.data, args.models, args.out, args.split, args.checkpoint)
        elif args.command == "analyze":
            cmd_analyze(cfg, args.data, args.reports, args.out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, PointFormatError, ModelFormatError, InvalidSceneError, GridBoundsError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
