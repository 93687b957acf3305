"""Detection metrics and uncertainty analyses.

Covers greedy NMS, F1 against IoU thresholds, IoU-binned uncertainty means,
Pearson correlation of uncertainty with distance and the facing/occluded
corner comparison, plus CSV and SVG emission of the summary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box3D, bev_iou, iou_3d
from .proposals import Anchor
from .uncertainty import UncertaintyReport, UnsupportedOperationError

F1_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
DEFAULT_BIN_EDGES = tuple(np.linspace(0.0, 1.0, 9))
EPISTEMIC_FIELDS = ("se", "mi", "epistemic_tv_total", "tv_x", "tv_y", "tv_z")
ALEATORIC_FIELDS = ("aleatoric_var_x", "aleatoric_var_y", "aleatoric_var_z", "aleatoric_tv_total")

__all__ = [
    "Detection", "MatchedDetection", "F1Row", "EvalSummary", "UndefinedCorrelationError",
    "iou_3d", "nms", "f1_table", "match_detections", "bin_uncertainty_by_iou",
    "pearson", "corner_occlusion_stats", "summarize", "write_summary_csv", "write_plots",
]


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class Detection:
    scene_id: str
    box: Box3D
    score: float
    report: UncertaintyReport | None = None
    anchor: Anchor | None = None


@dataclass
class MatchedDetection:
    detection: Detection
    best_gt: Box3D | None
    iou: float
    distance: float

    @property
    def report(self) -> UncertaintyReport | None:
        return self.detection.report


@dataclass
class F1Row:
    threshold: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def nms(detections: Sequence[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy suppression by score at BEV IoU >= ``iou_thresh``.

    Equal scores keep their input order. Detections from different scenes
    never suppress each other.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept: list[Detection] = []
    for i in order:
        d = detections[i]
        if all(k.scene_id != d.scene_id or bev_iou(k.box, d.box) < iou_thresh for k in kept):
            kept.append(d)
    return kept


def _group(detections, gts):
    if not isinstance(gts, Mapping):
        gts = {d.scene_id: list(gts) for d in detections} or {"": list(gts)}
    scenes: dict[str, list[Detection]] = {sid: [] for sid in gts}
    for d in detections:
        if d.scene_id not in scenes:
            raise KeyError(f"detection scene {d.scene_id!r} has no ground truth entry")
        scenes[d.scene_id].append(d)
    return scenes, gts


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def f1_table(detections: Sequence[Detection], gts, thresholds=F1_THRESHOLDS) -> list[F1Row]:
    """Precision/recall/F1 at each IoU threshold.

    ``gts`` maps scene id to its ground-truth boxes (a plain sequence is
    accepted for a single scene). Within a scene detections are taken in
    descending score order and each claims its best unclaimed gt with IoU at
    or above the threshold. Detections are expected to be gated already.
    """
    scenes, gts = _group(detections, gts)
    per_scene = []
    n_gt = 0
    for sid, dets in scenes.items():
        boxes = list(gts[sid])
        n_gt += len(boxes)
        dets = sorted(dets, key=lambda d: -d.score)
        iou = np.array([[iou_3d(d.box, g) for g in boxes] for d in dets]).reshape(len(dets), len(boxes))
        per_scene.append(iou)
    rows = []
    for thr in thresholds:
        tp = fp = 0
        for iou in per_scene:
            claimed = np.zeros(iou.shape[1], dtype=bool)
            for i in range(iou.shape[0]):
                cand = np.where(claimed, -1.0, iou[i])
                j = int(np.argmax(cand)) if cand.size else -1
                if j >= 0 and cand[j] >= thr:
                    claimed[j] = True
                    tp += 1
                else:
                    fp += 1
        fn = n_gt - tp
        p, r, f1 = f1_from_counts(tp, fp, fn)
        rows.append(F1Row(float(thr), p, r, f1, tp, fp, fn))
    return rows


def match_detections(detections: Sequence[Detection], gts) -> list[MatchedDetection]:
    """Pair each detection with its highest-IoU gt (not one-to-one)."""
    scenes, gts = _group(detections, gts)
    out = []
    for d in detections:
        best, best_iou = None, 0.0
        for g in gts[d.scene_id]:
            v = iou_3d(d.box, g)
            if v > best_iou:
                best, best_iou = g, v
        out.append(MatchedDetection(d, best, best_iou, math.hypot(d.box.x, d.box.y)))
    return out


def _field(md: MatchedDetection, name: str):
    rep = md.report
    return None if rep is None else getattr(rep, name, None)


def bin_uncertainty_by_iou(matched: Sequence[MatchedDetection], bin_edges=DEFAULT_BIN_EDGES, fields=None):
    """Mean of each uncertainty field per IoU bin.

    Bins are half-open ``[lo, hi)`` except the last, which includes its top
    edge. Empty bins map to ``None``. Fields missing from the reports (e.g.
    aleatoric sums of an epistemic-only model) are left out of the result.
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    if fields is None:
        fields = EPISTEMIC_FIELDS + ALEATORIC_FIELDS if matched else EPISTEMIC_FIELDS
    ious = np.array([m.iou for m in matched])
    idx = np.searchsorted(edges, ious, side="right") - 1
    idx = np.where(ious == edges[-1], len(edges) - 2, idx)
    out = {}
    for name in fields:
        vals = [_field(m, name) for m in matched]
        if any(v is None for v in vals):
            continue
        vals = np.array(vals, dtype=np.float64)
        out[name] = [
            float(vals[idx == b].mean()) if np.any(idx == b) else None
            for b in range(len(edges) - 1)
        ]
    return out


def pearson(xs, ys) -> float:
    """Sample Pearson correlation; raises if either series is constant."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length series of at least 2 values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def corner_occlusion_stats(matched: Sequence[MatchedDetection]):
    """Fraction of detections whose occluded-corner variance exceeds the facing one.

    Returns ``(fraction, pairs)`` with ``pairs`` a list of
    ``(facing_sum, occluded_sum)``; ``fraction`` is ``None`` for no input.
    """
    pairs = []
    for m in matched:
        rep = m.report
        if rep is None or rep.facing_sum is None:
            raise UnsupportedOperationError("detection has no aleatoric variance")
        pairs.append((rep.facing_sum, rep.occluded_sum))
    if not pairs:
        return None, pairs
    frac = sum(1 for f, o in pairs if o > f) / len(pairs)
    return frac, pairs


# --- summary ---------------------------------------------------------------

PCC_AXES = {
    "epistemic": ("tv_x", "tv_y", "tv_z", "epistemic_tv_total"),
    "aleatoric": ("aleatoric_var_x", "aleatoric_var_y", "aleatoric_var_z", "aleatoric_tv_total"),
}
AXIS_NAMES = ("x", "y", "z", "all")


@dataclass
class EvalSummary:
    f1: list[F1Row]
    bin_edges: tuple[float, ...]
    bins: dict[str, list[float | None]]
    pcc: dict[str, float | None]  # e.g. "epistemic_x"; None when undefined
    occluded_fraction: float | None
    n_detections: int
    n_gt: int
    matched: list[MatchedDetection] = field(default_factory=list, repr=False)

    def f1_at(self, thr: float) -> float:
        for row in self.f1:
            if abs(row.threshold - thr) < 1e-12:
                return row.f1
        raise KeyError(thr)


def distance_correlations(matched: Sequence[MatchedDetection]) -> dict[str, float | None]:
    """PCC of distance against each spatial-uncertainty sum, None if undefined."""
    out: dict[str, float | None] = {}
    dist = [m.distance for m in matched]
    for kind, names in PCC_AXES.items():
        cols = [[_field(m, n) for m in matched] for n in names]
        if not matched and kind != "epistemic":
            continue
        if any(v is None for col in cols for v in col):
            continue
        for axis, col in zip(AXIS_NAMES, cols):
            try:
                out[f"{kind}_{axis}"] = pearson(dist, col)
            except ValueError:
                out[f"{kind}_{axis}"] = None
    return out


def summarize(
    detections: Sequence[Detection],
    gts,
    thresholds=F1_THRESHOLDS,
    bin_edges=DEFAULT_BIN_EDGES,
    tp_iou: float = 0.5,
) -> EvalSummary:
    """Run every analysis on one model's gated, suppressed detections."""
    if not isinstance(gts, Mapping):
        gts = {"": list(gts)}
    rows = f1_table(detections, gts, thresholds)
    matched = match_detections(detections, gts)
    bins = bin_uncertainty_by_iou(matched, bin_edges)
    pcc = distance_correlations(matched)
    tps = [m for m in matched if m.iou >= tp_iou]
    frac = None
    if tps and all(m.report is not None and m.report.has_aleatoric for m in tps):
        frac, _ = corner_occlusion_stats(tps)
    return EvalSummary(
        f1=rows,
        bin_edges=tuple(float(e) for e in bin_edges),
        bins=bins,
        pcc=pcc,
        occluded_fraction=frac,
        n_detections=len(detections),
        n_gt=sum(len(v) for v in gts.values()),
        matched=matched,
    )


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_rows(s: EvalSummary) -> list[tuple[str, str, str]]:
    rows = [("n_detections", "", _fmt(s.n_detections)), ("n_gt", "", _fmt(s.n_gt))]
    for r in s.f1:
        key = f"{r.threshold:g}"
        rows += [
            ("precision", key, _fmt(r.precision)),
            ("recall", key, _fmt(r.recall)),
            ("f1", key, _fmt(r.f1)),
        ]
    edges = s.bin_edges
    for name, means in s.bins.items():
        for b, m in enumerate(means):
            if m is not None:
                rows.append((f"bin_mean_{name}", f"[{edges[b]:g},{edges[b + 1]:g})", _fmt(m)))
    for key, v in s.pcc.items():
        rows.append(("pcc_distance", key, _fmt(v)))
    if s.occluded_fraction is not None or any(
        m.report is not None and m.report.has_aleatoric for m in s.matched
    ):
        rows.append(("occluded_gt_facing_fraction", "", _fmt(s.occluded_fraction)))
    return rows


def write_summary_csv(s: EvalSummary, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["name", "key", "value"])
        w.writerows(summary_rows(s))


def write_plots(s: EvalSummary, out_dir, prefix: str = "") -> list[Path]:
    """F1-vs-threshold, uncertainty-vs-IoU-bin and uncertainty-vs-distance SVGs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "bayeslidar"
    meta = {"Date": None, "Creator": None}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r.threshold for r in s.f1], [r.f1 for r in s.f1], marker="o")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1)
    p = out / f"{prefix}f1_vs_iou.svg"
    fig.savefig(p, format="svg", metadata=meta)
    plt.close(fig)
    paths.append(p)

    centers = [0.5 * (a + b) for a, b in zip(s.bin_edges[:-1], s.bin_edges[1:])]
    groups = [("classification", ("se", "mi")), ("epistemic_tv", ("tv_x", "tv_y", "tv_z")),
              ("aleatoric_var", ("aleatoric_var_x", "aleatoric_var_y", "aleatoric_var_z"))]
    for title, names in groups:
        names = [n for n in names if n in s.bins]
        if not names:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for n in names:
            pts = [(c, m) for c, m in zip(centers, s.bins[n]) if m is not None]
            if pts:
                ax.plot(*zip(*pts), marker="o", label=n)
        ax.set_xlabel("IoU")
        ax.set_ylabel("mean")
        if ax.lines:
            ax.legend()
        p = out / f"{prefix}{title}_vs_iou.svg"
        fig.savefig(p, format="svg", metadata=meta)
        plt.close(fig)
        paths.append(p)

    withrep = [m for m in s.matched if m.report is not None]
    if withrep:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        d = [m.distance for m in withrep]
        ax.scatter(d, [m.report.epistemic_tv_total for m in withrep], s=6, label="epistemic TV")
        if all(m.report.has_aleatoric for m in withrep):
            ax.scatter(d, [m.report.aleatoric_tv_total for m in withrep], s=6, label="aleatoric var")
        ax.set_xlabel("distance [m]")
        ax.set_yscale("symlog", linthresh=1e-4)
        ax.legend()
        p = out / f"{prefix}uncertainty_vs_distance.svg"
        fig.savefig(p, format="svg", metadata=meta)
        plt.close(fig)
        paths.append(p)
    return paths
