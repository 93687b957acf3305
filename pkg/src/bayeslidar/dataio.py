"""On-disk layout shared by the command-line steps.

A dataset directory holds ``manifest.json``, ``gt.jsonl`` (one line per
scene) and ``points/<scene_id>.blpc``. A report directory holds
``header.json`` plus ``scenes/<scene_id>.jsonl`` with one detection per line.
All JSON is written with sorted keys so reruns are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

from .evaluation import Detection
from .geometry import Box3D
from .pipeline import SceneRecord
from .pointcloud import PointCloud, load_points, save_points
from .uncertainty import UncertaintyReport

DATASET_FORMAT = "bayeslidar-dataset"
REPORTS_FORMAT = "bayeslidar-reports"
FORMAT_VERSION = 1


class DataError(ValueError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _read_jsonl(path: Path) -> list[dict]:
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{n}: invalid JSON ({exc})") from None
    return out


# --- datasets --------------------------------------------------------------


def write_dataset(records: list[SceneRecord], clouds: list[PointCloud], out_dir, seed: int, config_text: str) -> dict:
    out = Path(out_dir)
    (out / "points").mkdir(parents=True, exist_ok=True)
    scenes = {}
    with open(out / "gt.jsonl", "w") as f:
        for rec, cloud in zip(records, clouds):
            rel = f"points/{rec.scene_id}.blpc"
            save_points(cloud, out / rel)
            scenes[rec.scene_id] = {
                "split": rec.split,
                "points": rel,
                "rng_seed": rec.spec.rng_seed,
                "noise_sigma": rec.spec.noise_sigma,
                "n_points": len(cloud),
            }
            f.write(_dump({
                "scene_id": rec.scene_id,
                "split": rec.split,
                "boxes": [v.box.to_dict() for v in rec.spec.vehicles],
                "densities": [v.density for v in rec.spec.vehicles],
            }) + "\n")
    manifest = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "seed": seed,
        "train": [r.scene_id for r in records if r.split == "train"],
        "test": [r.scene_id for r in records if r.split == "test"],
        "scenes": scenes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    (out / "config.ini").write_text(config_text)
    return manifest


class Dataset:
    """Read access to a dataset directory written by :func:`write_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = _read_json(self.root / "manifest.json")
        if self.manifest.get("format") != DATASET_FORMAT:
            raise DataError(f"{self.root}: not a dataset directory")
        self.gts: dict[str, list[Box3D]] = {}
        for rec in _read_jsonl(self.root / "gt.jsonl"):
            try:
                self.gts[rec["scene_id"]] = [Box3D.from_dict(b) for b in rec["boxes"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{self.root / 'gt.jsonl'}: bad record ({exc})") from None
        for sid in self.scene_ids("train") + self.scene_ids("test"):
            if sid not in self.gts:
                raise DataError(f"scene {sid} has no ground truth")

    def scene_ids(self, split: str) -> list[str]:
        if split not in ("train", "test"):
            raise DataError(f"unknown split {split!r}")
        return list(self.manifest.get(split, []))

    def points(self, scene_id: str) -> PointCloud:
        try:
            rel = self.manifest["scenes"][scene_id]["points"]
        except KeyError:
            raise DataError(f"unknown scene {scene_id}") from None
        path = self.root / rel
        if not path.exists():
            raise DataError(f"missing point file {path}")
        cloud = load_points(path)
        return PointCloud(cloud.points, scene_id)


# --- reports ---------------------------------------------------------------


def detection_record(det: Detection) -> dict:
    rec = {"scene_id": det.scene_id, "box": det.box.to_dict(), "score": det.score}
    if det.anchor is not None:
        rec["anchor"] = det.anchor.box.to_dict()
    if det.report is not None:
        rec["report"] = det.report.to_dict()
    return rec


def write_reports(out_dir, header: dict, per_scene: dict[str, list[Detection]]):
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    for stale in (out / "scenes").glob("*.jsonl"):
        stale.unlink()
    header = dict(header, format=REPORTS_FORMAT, version=FORMAT_VERSION, scenes=list(per_scene))
    (out / "header.json").write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    for sid, dets in per_scene.items():
        with open(out / "scenes" / f"{sid}.jsonl", "w") as f:
            for d in dets:
                f.write(_dump(detection_record(d)) + "\n")


def read_reports(report_dir) -> tuple[dict, dict[str, list[Detection]]]:
    root = Path(report_dir)
    header = _read_json(root / "header.json")
    if header.get("format") != REPORTS_FORMAT:
        raise DataError(f"{root}: not a report directory")
    files = sorted((root / "scenes").glob("*.jsonl"))
    out: dict[str, list[Detection]] = {}
    for path in files:
        sid = path.stem
        dets = []
        for rec in _read_jsonl(path):
            try:
                if rec["scene_id"] != sid:
                    raise DataError(f"{path}: record for scene {rec['scene_id']}")
                rep = UncertaintyReport.from_dict(rec["report"]) if "report" in rec else None
                dets.append(Detection(sid, Box3D.from_dict(rec["box"]), float(rec["score"]), rep))
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, DataError):
                    raise
                raise DataError(f"{path}: bad record ({exc})") from None
        out[sid] = dets
    return header, out


def check_alignment(report_ids, gt_ids):
    """Raise listing orphans when report and ground-truth scene ids differ."""
    r, g = set(report_ids), set(gt_ids)
    if r == g:
        return
    parts = []
    if r - g:
        parts.append("reports without ground truth: " + ", ".join(sorted(r - g)))
    if g - r:
        parts.append("ground truth without reports: " + ", ".join(sorted(g - r)))
    raise DataError("scene ids do not align; " + "; ".join(parts))
