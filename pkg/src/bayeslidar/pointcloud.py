"""Synthetic Lidar scans of vehicle scenes and point-file I/O.

A scan samples points on the faces of each ground-truth box that face the
sensor, rejects points whose line of sight passes through another vehicle,
and thins the sampling with the squared inverse of the distance. Points are
stored as float32 rows ``(x, y, z, intensity)``.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box3D, bev_iou, segments_hit_box

GROUND_Z = -1.73
REFERENCE_DISTANCE = 10.0

CROP_X = (0.0, 100.0)
CROP_Y = (-30.0, 30.0)
CROP_Z = (-3.5, 0.6)

MAGIC = b"BLPC"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class InvalidSceneError(ValueError):
    pass


class PointFormatError(ValueError):
    """Malformed point file. ``record`` is the offending record index, if any."""

    def __init__(self, message: str, record: int | None = None):
        super().__init__(message if record is None else f"record {record}: {message}")
        self.record = record


@dataclass
class PointCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.float32))
    scene_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (n, 4), got {pts.shape}")
        self.points = pts

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(frozen=True)
class Vehicle:
    box: Box3D
    density: float = 40.0  # points per m^2 at the reference distance


@dataclass(frozen=True)
class SceneSpec:
    vehicles: tuple[Vehicle, ...] = ()
    rng_seed: int = 0
    noise_sigma: float = 0.05
    clutter_density: float = 0.0  # ground points per m^2, 0 disables
    scene_id: str = ""

    def validate(self):
        if self.noise_sigma < 0:
            raise InvalidSceneError("noise_sigma must be >= 0")
        if self.clutter_density < 0:
            raise InvalidSceneError("clutter_density must be >= 0")
        for i, veh in enumerate(self.vehicles):
            if not veh.density > 0:
                raise InvalidSceneError(f"vehicle {i}: density must be > 0")
            c = veh.box.corners()
            inside = (
                c[:, 0].min() >= CROP_X[0] and c[:, 0].max() < CROP_X[1]
                and c[:, 1].min() >= CROP_Y[0] and c[:, 1].max() < CROP_Y[1]
                and c[:, 2].min() >= CROP_Z[0] and c[:, 2].max() < CROP_Z[1]
            )
            if not inside:
                raise InvalidSceneError(f"vehicle {i} is not inside the crop region")
        boxes = [v.box for v in self.vehicles]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if bev_iou(boxes[i], boxes[j]) > 0:
                    raise InvalidSceneError(f"vehicles {i} and {j} overlap")


def box_faces(box: Box3D):
    """Yield (origin corner, edge u, edge v, outward unit normal) per face."""
    c = box.corners()
    # front, rear, left, right, top, bottom
    for a, b, d in ((0, 3, 4), (2, 1, 6), (1, 0, 5), (3, 2, 7), (4, 7, 5), (0, 1, 3)):
        u = c[b] - c[a]
        v = c[d] - c[a]
        n = np.cross(u, v)
        n /= np.linalg.norm(n)
        if float(n @ (c[a] + 0.5 * (u + v) - box.center)) < 0.0:
            n = -n
        yield c[a], u, v, n


def _stratified_unit_square(n: int, rng: np.random.Generator) -> np.ndarray:
    """n points in [0,1)^2, one per stratum along each axis."""
    su = (rng.permutation(n) + rng.random(n)) / n
    sv = (rng.permutation(n) + rng.random(n)) / n
    return np.stack([su, sv], axis=1)


def _occluded(pts: np.ndarray, boxes, skip: int | None) -> np.ndarray:
    hit = np.zeros(len(pts), dtype=bool)
    for k, b in enumerate(boxes):
        if k == skip or len(pts) == 0:
            continue
        hit |= segments_hit_box(pts, b)
    return hit


def simulate_scan(spec: SceneSpec) -> PointCloud:
    """Sample a Lidar scan of ``spec``. Pure function of the scene description, seed included."""
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    boxes = [v.box for v in spec.vehicles]
    chunks = []
    for k, veh in enumerate(spec.vehicles):
        for corner, u, v, normal in box_faces(veh.box):
            centroid = corner + 0.5 * (u + v)
            if float(normal @ -centroid) <= 0.0:
                continue
            area = float(np.linalg.norm(np.cross(u, v)))
            dist = float(np.linalg.norm(centroid))
            mean = veh.density * area * (REFERENCE_DISTANCE / dist) ** 2
            n = int(rng.poisson(mean))
            if n == 0:
                continue
            uv = _stratified_unit_square(n, rng)
            pts = corner + uv[:, :1] * u + uv[:, 1:] * v
            if spec.noise_sigma > 0:
                pts = pts + rng.normal(0.0, spec.noise_sigma, size=(n, 1)) * normal
            inten = rng.uniform(0.3, 0.9, size=n)
            keep = ~_occluded(pts, boxes, skip=k)
            chunks.append(np.column_stack([pts, inten])[keep])
    if spec.clutter_density > 0:
        area = (CROP_X[1] - CROP_X[0]) * (CROP_Y[1] - CROP_Y[0])
        n = int(rng.poisson(spec.clutter_density * area))
        xy = rng.uniform((CROP_X[0], CROP_Y[0]), (CROP_X[1], CROP_Y[1]), size=(n, 2))
        z = GROUND_Z + rng.normal(0.0, spec.noise_sigma, size=n) if spec.noise_sigma > 0 else np.full(n, GROUND_Z)
        inten = rng.uniform(0.0, 0.2, size=n)
        pts = np.column_stack([xy, z])
        under = np.zeros(n, dtype=bool)
        for b in boxes:
            local = b.to_local(pts)
            under |= np.all(np.abs(local[:, :2]) <= 0.5 * b.size[:2], axis=1)
        keep = ~under & ~_occluded(pts, boxes, skip=None)
        chunks.append(np.column_stack([pts, inten])[keep])
    if not chunks:
        return PointCloud(np.zeros((0, 4), np.float32), spec.scene_id)
    return PointCloud(np.concatenate(chunks).astype(np.float32), spec.scene_id)


# --- file formats ----------------------------------------------------------


def _check_records(pts: np.ndarray, offset: int = 0):
    bad = ~np.all(np.isfinite(pts), axis=1)
    if bad.any():
        raise PointFormatError("non-finite value", int(np.argmax(bad)) + offset)
    bad = (pts[:, 3] < 0) | (pts[:, 3] > 1)
    if bad.any():
        i = int(np.argmax(bad))
        raise PointFormatError(f"intensity {float(pts[i, 3])} outside [0, 1]", i + offset)


def save_points(cloud: PointCloud, path):
    """Write ``cloud`` in the BLPC binary format (or CSV for a .csv suffix)."""
    path = Path(path)
    pts = cloud.points
    _check_records(pts)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["x", "y", "z", "intensity"])
            for row in pts:
                w.writerow([repr(float(v)) for v in row])
        return
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(pts)))
        f.write(pts.astype("<f4").tobytes())


def _load_csv(text: str, scene_id: str) -> PointCloud:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return PointCloud(scene_id=scene_id)
    if [h.strip() for h in header] != ["x", "y", "z", "intensity"]:
        raise PointFormatError(f"unexpected CSV header {header!r}")
    rows = []
    for i, row in enumerate(reader):
        if not row:
            continue
        if len(row) != 4:
            raise PointFormatError(f"expected 4 fields, got {len(row)}", i)
        try:
            rows.append([float(v) for v in row])
        except ValueError as exc:
            raise PointFormatError(str(exc), i) from None
    pts = np.array(rows, dtype=np.float64).reshape(-1, 4)
    _check_records(pts)
    return PointCloud(pts.astype(np.float32), scene_id)


def load_points(path, scene_id: str | None = None) -> PointCloud:
    """Read a BLPC binary or ``x,y,z,intensity`` CSV point file."""
    path = Path(path)
    sid = path.stem if scene_id is None else scene_id
    data = path.read_bytes()
    if not data:
        return PointCloud(scene_id=sid)
    if not data.startswith(MAGIC):
        return _load_csv(data.decode("utf-8"), sid)
    if len(data) < _HEADER.size:
        raise PointFormatError("truncated header")
    _, version, count = _HEADER.unpack_from(data)
    if version != VERSION:
        raise PointFormatError(f"unsupported version {version}")
    body = data[_HEADER.size:]
    if len(body) % 16:
        raise PointFormatError("trailing partial record", len(body) // 16)
    if len(body) // 16 != count:
        raise PointFormatError(
            f"header declares {count} records, file holds {len(body) // 16}",
            min(count, len(body) // 16),
        )
    pts = np.frombuffer(body, dtype="<f4").reshape(-1, 4).astype(np.float32)
    _check_records(pts)
    return PointCloud(pts, sid)


def distance_scaled_count(density: float, area: float, distance: float) -> float:
    """Expected number of returns on a face of ``area`` m^2 at ``distance`` m."""
    return density * area * (REFERENCE_DISTANCE / distance) ** 2

