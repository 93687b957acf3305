"""Anchors, the corner-offset box encoding, ROI pooling and proposals.

A box is regressed as 24 offsets of its corners from the corners of an
anchor, divided by the anchor's space diagonal. The layout is
``[x0..x7, y0..y7, z0..z7]`` with the corner order of :mod:`geometry`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .bev import BevConfig, BevGrid
from .geometry import Box3D, bev_iou, corners_to_vector, fit_box, vector_to_corners

ANCHOR_AREAS = (16**2, 32**2, 48**2)  # cells^2
ANCHOR_RATIOS = (1.0, 2.0, 0.5)  # l / w, i.e. w:l = 1:1, 1:2, 2:1
ANCHOR_Z_CENTER = -1.0
ANCHOR_HEIGHT = 2.5

POSITIVE, BACKGROUND, IGNORED = 1, 0, -1


@dataclass(frozen=True)
class Anchor:
    box: Box3D
    index: int = 0  # position in lattice order; used for deterministic tie-breaks

    @property
    def diagonal(self) -> float:
        return self.box.diagonal

    def corner_vector(self) -> np.ndarray:
        return corners_to_vector(self.box.corners())


class AnchorSet(Sequence):
    """Axis-aligned anchors stored as arrays; indexing yields :class:`Anchor`."""

    def __init__(self, centers: np.ndarray, sizes: np.ndarray):
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        self.sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 3)
        if len(self.centers) != len(self.sizes):
            raise ValueError("centers and sizes differ in length")

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        i = range(len(self))[i]
        return Anchor(Box3D.from_arrays(self.centers[i], self.sizes[i]), i)

    @property
    def diagonals(self) -> np.ndarray:
        return np.linalg.norm(self.sizes, axis=1)

    @classmethod
    def from_anchors(cls, anchors: Iterable[Anchor]) -> AnchorSet:
        anchors = list(anchors)
        if any(a.box.yaw != 0.0 for a in anchors):
            raise ValueError("AnchorSet holds axis-aligned anchors only")
        return cls(
            np.array([a.box.center for a in anchors]).reshape(-1, 3),
            np.array([a.box.size for a in anchors]).reshape(-1, 3),
        )


def _as_anchor_set(anchors) -> AnchorSet:
    return anchors if isinstance(anchors, AnchorSet) else AnchorSet.from_anchors(anchors)


def anchor_shapes(resolution: float = 0.1):
    """The nine (l, w) footprints, scale-major then ratio."""
    out = []
    for area in ANCHOR_AREAS:
        for rho in ANCHOR_RATIOS:
            out.append((math.sqrt(area * rho) * resolution, math.sqrt(area / rho) * resolution))
    return out


def generate_anchors(
    cfg: BevConfig = BevConfig(),
    stride: int = 8,
    z_center: float = ANCHOR_Z_CENTER,
    height: float = ANCHOR_HEIGHT,
) -> AnchorSet:
    """Nine anchors at the center of every ``stride`` x ``stride`` cell block.

    Ordering is row-major over the lattice, then anchor scale, then ratio.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    step = stride * cfg.resolution
    xs = cfg.x_range[0] + (np.arange(cfg.rows // stride) + 0.5) * step
    ys = cfg.y_range[0] + (np.arange(cfg.cols // stride) + 0.5) * step
    shapes = np.array(anchor_shapes(cfg.resolution))
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pos = np.stack([gx.ravel(), gy.ravel()], axis=1)
    k = len(shapes)
    centers = np.column_stack([np.repeat(pos, k, axis=0), np.full(len(pos) * k, z_center)])
    sizes = np.column_stack([np.tile(shapes, (len(pos), 1)), np.full(len(pos) * k, height)])
    return AnchorSet(centers, sizes)


# --- box encoding ----------------------------------------------------------


def encode_box(gt: Box3D, anchor: Anchor) -> np.ndarray:
    return (corners_to_vector(gt.corners()) - anchor.corner_vector()) / anchor.diagonal


def decode_corners(v, anchor: Anchor) -> np.ndarray:
    """24-d offsets -> (8, 3) sensor-frame corners."""
    v = np.asarray(v, dtype=np.float64)
    return vector_to_corners(anchor.diagonal * v + anchor.corner_vector())


def decode_box(v, anchor: Anchor) -> tuple[np.ndarray, Box3D]:
    corners = decode_corners(v, anchor)
    return corners, fit_box(corners)


def to_sensor_frame(v: np.ndarray, anchor: Anchor) -> np.ndarray:
    """Offsets (..., 24) -> sensor-frame corner vectors (..., 24)."""
    return anchor.diagonal * np.asarray(v, dtype=np.float64) + anchor.corner_vector()


# --- grid pooling ----------------------------------------------------------


def integral_image(chans: np.ndarray) -> np.ndarray:
    """Zero-padded 2D cumulative sums over the last two axes."""
    chans = np.asarray(chans, dtype=np.float64)
    out = np.zeros(chans.shape[:-2] + (chans.shape[-2] + 1, chans.shape[-1] + 1))
    out[..., 1:, 1:] = chans.cumsum(-2).cumsum(-1)
    return out


def _box_sum(ii: np.ndarray, r0, r1, c0, c1) -> np.ndarray:
    R, C = ii.shape[-2] - 1, ii.shape[-1] - 1
    r0, r1 = np.clip(r0, 0, R), np.clip(r1, 0, R)
    c0, c1 = np.clip(c0, 0, C), np.clip(c1, 0, C)
    return ii[..., r1, c1] - ii[..., r0, c1] - ii[..., r1, c0] + ii[..., r0, c0]


def _footprint_rect(centers: np.ndarray, sizes: np.ndarray, cfg: BevConfig):
    """Anchor AABBs in continuous cell coordinates: (r0, r1, c0, c1)."""
    res = cfg.resolution
    r0 = (centers[:, 0] - 0.5 * sizes[:, 0] - cfg.x_range[0]) / res
    r1 = (centers[:, 0] + 0.5 * sizes[:, 0] - cfg.x_range[0]) / res
    c0 = (centers[:, 1] - 0.5 * sizes[:, 1] - cfg.y_range[0]) / res
    c1 = (centers[:, 1] + 0.5 * sizes[:, 1] - cfg.y_range[0]) / res
    return r0, r1, c0, c1


def _first_center_at_or_after(edge):
    # Index of the first cell whose center (k + 0.5) is >= edge.
    return np.ceil(np.asarray(edge) - 0.5 - 1e-9).astype(np.int64)


class RoiPooler:
    """Pools many ROIs from one grid, sharing the integral image."""

    def __init__(self, grid: BevGrid, bins: int = 8):
        self.grid = grid
        self.bins = bins
        self.ii = integral_image(grid.data)

    def pool(self, anchors) -> np.ndarray:
        a = _as_anchor_set(anchors)
        if len(a) == 0:
            return np.zeros((0, self.grid.cfg.channels * self.bins**2))
        cfg, G = self.grid.cfg, self.bins
        r0, r1, c0, c1 = _footprint_rect(a.centers, a.sizes, cfg)
        if np.any((r1 <= 0) | (r0 >= cfg.rows) | (c1 <= 0) | (c0 >= cfg.cols)):
            raise ValueError("anchor footprint lies fully outside the grid")
        t = np.linspace(0.0, 1.0, G + 1)
        redges = r0[:, None] + (r1 - r0)[:, None] * t
        cedges = c0[:, None] + (c1 - c0)[:, None] * t
        ri = _first_center_at_or_after(redges)
        ci = _first_center_at_or_after(cedges)
        rlo, rhi = ri[:, :-1], ri[:, 1:]
        clo, chi = ci[:, :-1], ci[:, 1:]
        # A bin narrower than a cell falls back to the cell under its center.
        rmid = np.floor(0.5 * (redges[:, :-1] + redges[:, 1:])).astype(np.int64)
        cmid = np.floor(0.5 * (cedges[:, :-1] + cedges[:, 1:])).astype(np.int64)
        empty_r = rhi <= rlo
        empty_c = chi <= clo
        rlo = np.where(empty_r, rmid, rlo)
        rhi = np.where(empty_r, rmid + 1, rhi)
        clo = np.where(empty_c, cmid, clo)
        chi = np.where(empty_c, cmid + 1, chi)
        sums = _box_sum(
            self.ii,
            rlo[:, :, None], rhi[:, :, None], clo[:, None, :], chi[:, None, :],
        )  # (channels, n, G, G)
        count = (rhi - rlo)[:, :, None] * (chi - clo)[:, None, :]
        means = sums / count
        return np.ascontiguousarray(np.moveaxis(means, 0, 1)).reshape(len(a), -1)


def pool_roi(grid: BevGrid, anchor: Anchor, G: int = 8) -> np.ndarray:
    """Mean-pool the anchor's BEV bounding rectangle into G x G bins.

    Returns a flat, channel-major vector of length ``G * G * (M + 2)``.
    """
    return RoiPooler(grid, G).pool([anchor])[0]


def footprint_scores(grid: BevGrid, anchors) -> np.ndarray:
    """Summed density over the cells whose centers lie in each footprint."""
    a = _as_anchor_set(anchors)
    ii = integral_image(grid.density)
    r0, r1, c0, c1 = _footprint_rect(a.centers, a.sizes, grid.cfg)
    s = _box_sum(
        ii,
        _first_center_at_or_after(r0), _first_center_at_or_after(r1),
        _first_center_at_or_after(c0), _first_center_at_or_after(c1),
    )
    # Round away cumulative-sum noise so equal clusters tie exactly.
    return np.round(s, 9)


def rank_anchors(grid: BevGrid, anchors, min_density: float = 0.5):
    """Indices of anchors scoring >= ``min_density``, best first, and their scores.

    Exact score ties keep lattice order.
    """
    a = _as_anchor_set(anchors)
    if len(a) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    scores = footprint_scores(grid, a)
    idx = np.flatnonzero(scores >= min_density)
    idx = idx[np.lexsort((idx, -scores[idx]))]
    return idx, scores[idx]


def propose(grid: BevGrid, anchors, top_k: int = 64, min_density: float = 0.5) -> list[Anchor]:
    """Top-k anchors by footprint density mass; ties go to the lower lattice index."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    idx, _ = rank_anchors(grid, anchors, min_density)
    idx = idx[:top_k]
    if isinstance(anchors, AnchorSet):
        return [anchors[int(i)] for i in idx]
    anchors = list(anchors)
    return [anchors[int(i)] for i in idx]


# --- training targets ------------------------------------------------------


class Target(NamedTuple):
    anchor: Anchor
    label: int
    offsets: np.ndarray | None


def match_targets(
    anchors: Sequence[Anchor],
    gts: Sequence[Box3D],
    pos_iou: float = 0.5,
    neg_iou: float = 0.35,
) -> list[Target]:
    """Faster-RCNN style label assignment by BEV IoU.

    Each anchor is positive (offsets to its best gt) at IoU >= ``pos_iou``,
    background below ``neg_iou`` and ignored in between. Every gt also
    claims its single best anchor as a positive.
    """
    if not 0 <= neg_iou < pos_iou <= 1:
        raise ValueError("need 0 <= neg_iou < pos_iou <= 1")
    anchors = list(anchors)
    if not anchors:
        return []
    if not gts:
        return [Target(a, BACKGROUND, None) for a in anchors]
    iou = np.array([[bev_iou(a.box, g) for g in gts] for a in anchors])
    best_gt = iou.argmax(axis=1)
    best = iou[np.arange(len(anchors)), best_gt]
    labels = np.where(best >= pos_iou, POSITIVE, np.where(best < neg_iou, BACKGROUND, IGNORED))
    for j in range(len(gts)):
        i = int(iou[:, j].argmax())
        if iou[i, j] > 0 and labels[i] != POSITIVE:
            labels[i] = POSITIVE
            best_gt[i] = j
    out = []
    for i, a in enumerate(anchors):
        lab = int(labels[i])
        off = encode_box(gts[int(best_gt[i])], a) if lab == POSITIVE else None
        out.append(Target(a, lab, off))
    return out


# --- JSON Lines interchange ------------------------------------------------


def proposal_record(scene_id: str, anchor: Anchor, score: float, offsets, log_vars=None) -> dict:
    rec = {
        "scene_id": scene_id,
        "anchor": anchor.box.to_dict(),
        "score": float(score),
        "offsets": [float(v) for v in np.asarray(offsets).ravel()],
    }
    if log_vars is not None:
        rec["log_vars"] = [float(v) for v in np.asarray(log_vars).ravel()]
    return rec


def write_proposals(path, records: Iterable[dict]):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=False) + "\n")


def read_proposals(path) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("scene_id", "anchor", "score", "offsets"):
            if key not in rec:
                raise ValueError(f"line {n}: missing field {key!r}")
        if len(rec["offsets"]) != 24 or ("log_vars" in rec and len(rec["log_vars"]) != 24):
            raise ValueError(f"line {n}: offsets/log_vars must have 24 entries")
        rec["anchor"] = Anchor(Box3D.from_dict(rec["anchor"]))
        out.append(rec)
    return out
