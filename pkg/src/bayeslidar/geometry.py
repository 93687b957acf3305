"""Oriented 3D boxes and the geometry kernels built on them.

Boxes live in the sensor frame: x forward, y left, z up, sensor at the
origin. Corner order is fixed and shared by the box encoding, the decoder
and the evaluation code:

    0 front-left-bottom   1 rear-left-bottom
    2 rear-right-bottom   3 front-right-bottom
    4..7 same order on the top face

i.e. the bottom face counter-clockwise (seen from above) starting at the
front-left corner, then the top face in matching order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COLLINEAR_EPS = 1e-9

# Unit-box corner signs in the (length, width, height) local axes.
_CORNER_SIGNS = np.array(
    [
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, 1],
        [-1, 1, 1],
        [-1, -1, 1],
        [1, -1, 1],
    ],
    dtype=np.float64,
)


class BoxFitError(ValueError):
    """Raised when a corner set is too degenerate to fit a box."""


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    t = math.fmod(theta + math.pi, 2.0 * math.pi)
    if t <= 0.0:
        t += 2.0 * math.pi
    return t - math.pi


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center (x, y, z), size (l, w, h) and yaw about z."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got {self.size}")
        vals = (self.x, self.y, self.z, self.l, self.w, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box parameters must be finite")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def from_arrays(cls, center, size, yaw=0.0) -> Box3D:
        cx, cy, cz = (float(c) for c in center)
        l, w, h = (float(s) for s in size)
        return cls(cx, cy, cz, l, w, h, float(yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def diagonal(self) -> float:
        return math.sqrt(self.l**2 + self.w**2 + self.h**2)

    @property
    def z_min(self) -> float:
        return self.z - 0.5 * self.h

    @property
    def z_max(self) -> float:
        return self.z + 0.5 * self.h

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self) -> np.ndarray:
        """Return the (8, 3) corner array in the module's fixed order."""
        local = _CORNER_SIGNS * (0.5 * self.size)
        return local @ self.rotation().T + self.center

    def footprint(self) -> np.ndarray:
        """Bottom-face polygon (4, 2), counter-clockwise."""
        return self.corners()[:4, :2]

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        """Express sensor-frame points in the box frame (origin at center)."""
        return (np.asarray(pts, dtype=np.float64) - self.center) @ self.rotation()

    def contains(self, pts: np.ndarray) -> np.ndarray:
        local = self.to_local(pts)
        return np.all(np.abs(local) <= 0.5 * self.size, axis=-1)

    def to_dict(self) -> dict:
        return {
            "center": [self.x, self.y, self.z],
            "size": [self.l, self.w, self.h],
            "yaw": self.yaw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Box3D:
        return cls.from_arrays(d["center"], d["size"], d.get("yaw", 0.0))


def corners_to_vector(corners: np.ndarray) -> np.ndarray:
    """(..., 8, 3) corners -> (..., 24) in [x0..x7, y0..y7, z0..z7] layout."""
    corners = np.asarray(corners, dtype=np.float64)
    return np.swapaxes(corners, -1, -2).reshape(corners.shape[:-2] + (24,))


def vector_to_corners(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`corners_to_vector`."""
    v = np.asarray(v, dtype=np.float64)
    return np.swapaxes(v.reshape(v.shape[:-1] + (3, 8)), -1, -2)


def fit_box(corners: np.ndarray) -> Box3D:
    """Fit an oriented box to 8 corners that need not form a rigid box.

    The center is the corner mean. Yaw comes from the first principal axis
    of the bottom four corners, signed so that it points from the rear
    corners towards the front ones. Dimensions are the extents of all eight
    corners along the fitted axes.
    """
    c = np.asarray(corners, dtype=np.float64).reshape(8, 3)
    if not np.all(np.isfinite(c)):
        raise BoxFitError("non-finite corner coordinates")
    center = c.mean(axis=0)
    if np.max(np.abs(c - center)) < COLLINEAR_EPS:
        raise BoxFitError("all corners coincide")
    bottom = c[:4, :2] - c[:4, :2].mean(axis=0)
    _, _, vt = np.linalg.svd(bottom, full_matrices=False)
    axis = vt[0]
    front = 0.5 * (c[0, :2] + c[3, :2]) - 0.5 * (c[1, :2] + c[2, :2])
    if float(axis @ front) < 0.0:
        axis = -axis
    perp = np.array([-axis[1], axis[0]])
    rel = c[:, :2] - center[:2]
    along = rel @ axis
    across = rel @ perp
    l = float(along.max() - along.min())
    w = float(across.max() - across.min())
    h = float(c[:, 2].max() - c[:, 2].min())
    if min(l, w, h) < COLLINEAR_EPS:
        raise BoxFitError(f"degenerate extents l={l}, w={w}, h={h}")
    yaw = math.atan2(axis[1], axis[0])
    return Box3D(float(center[0]), float(center[1]), float(center[2]), l, w, h, yaw)


# --- polygon kernels -------------------------------------------------------


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise polygons)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j]
            qx, qy = inp[(j + 1) % m]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            p_in = sp >= -COLLINEAR_EPS
            q_in = sq >= -COLLINEAR_EPS
            if p_in:
                out.append((px, py))
            if p_in != q_in:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _aabb(poly: np.ndarray):
    return poly[:, 0].min(), poly[:, 1].min(), poly[:, 0].max(), poly[:, 1].max()


def bev_intersection(a: Box3D, b: Box3D) -> float:
    """Area of the overlap of two box footprints."""
    pa, pb = a.footprint(), b.footprint()
    ax0, ay0, ax1, ay1 = _aabb(pa)
    bx0, by0, bx1, by1 = _aabb(pb)
    if ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0:
        return 0.0
    if a.yaw == 0.0 and b.yaw == 0.0:
        return (min(ax1, bx1) - max(ax0, bx0)) * (min(ay1, by1) - max(ay0, by0))
    inter = clip_convex(pa, pb)
    return max(polygon_area(inter), 0.0)


def bev_iou(a: Box3D, b: Box3D) -> float:
    if a == b:
        return 1.0  # clipping round-off would otherwise leave 1 - eps
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two yaw-rotated boxes (footprint overlap x height overlap)."""
    if a == b:
        return 1.0
    dz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if dz <= 0.0:
        return 0.0
    inter_area = bev_intersection(a, b)
    if inter_area <= 0.0:
        return 0.0
    inter = inter_area * dz
    union = a.volume + b.volume - inter
    return min(max(inter / union, 0.0), 1.0)


def bev_iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = bev_iou(a, b)
    return out


def aligned_bev_iou(centers_a, sizes_a, centers_b, sizes_b) -> np.ndarray:
    """Vectorised BEV IoU for yaw-free boxes; arrays (n, 2+) and (m, 2+)."""
    ca, sa = np.asarray(centers_a)[:, None, :2], np.asarray(sizes_a)[:, None, :2]
    cb, sb = np.asarray(centers_b)[None, :, :2], np.asarray(sizes_b)[None, :, :2]
    lo = np.maximum(ca - 0.5 * sa, cb - 0.5 * sb)
    hi = np.minimum(ca + 0.5 * sa, cb + 0.5 * sb)
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    union = np.prod(sa, axis=-1) + np.prod(sb, axis=-1) - inter
    return inter / union


# --- ray / segment tests ---------------------------------------------------


def segments_hit_box(ends: np.ndarray, box: Box3D, eps: float = 1e-9) -> np.ndarray:
    """For each open segment origin->end, does it pass through ``box``?

    Slab test in the box frame. Segments that only graze a face within
    ``eps`` or touch the box at an endpoint are not counted as hits.
    """
    ends = np.asarray(ends, dtype=np.float64).reshape(-1, 3)
    o = -box.center @ box.rotation()
    d = box.to_local(ends) - o
    half = 0.5 * box.size
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # Axis-parallel segments: inside slab -> unbounded, else never.
    par = d == 0.0
    inside = np.abs(o) < half
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    enter = tmin.max(axis=1)
    leave = tmax.min(axis=1)
    t_lo = np.maximum(enter, 0.0)
    t_hi = np.minimum(leave, 1.0)
    return t_hi - t_lo > eps
