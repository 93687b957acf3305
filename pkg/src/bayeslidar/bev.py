"""Bird's-eye-view encoding of point clouds.

The grid has ``M + 2`` channels: ``M`` height maps (one per z slice, lowest
first), an intensity map and a density map. Rows index x, columns index y;
cells are half-open, so a point exactly on an upper range edge is dropped.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .pointcloud import PointCloud

DENSITY_SATURATION = 64


class GridBoundsError(IndexError):
    pass


@dataclass(frozen=True)
class BevConfig:
    x_range: tuple[float, float] = (0.0, 100.0)
    y_range: tuple[float, float] = (-30.0, 30.0)
    z_range: tuple[float, float] = (-3.5, 0.6)
    resolution: float = 0.1
    num_slices: int = 4

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} is degenerate: {(lo, hi)}")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if self.num_slices < 1:
            raise ValueError("num_slices must be >= 1")
        for name in ("x_range", "y_range"):
            lo, hi = getattr(self, name)
            cells = (hi - lo) / self.resolution
            if abs(cells - round(cells)) > 1e-6:
                raise ValueError(f"{name} width is not a whole number of cells")

    @property
    def rows(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.resolution))

    @property
    def cols(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.resolution))

    @property
    def channels(self) -> int:
        return self.num_slices + 2

    @property
    def slice_thickness(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.num_slices


@dataclass
class BevGrid:
    data: np.ndarray  # (M + 2, rows, cols)
    cfg: BevConfig

    @property
    def heights(self) -> np.ndarray:
        return self.data[: self.cfg.num_slices]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[self.cfg.num_slices]

    @property
    def density(self) -> np.ndarray:
        return self.data[self.cfg.num_slices + 1]

    @property
    def shape(self):
        return self.data.shape


def density_value(n):
    """Log-compressed occupancy, saturating at ``DENSITY_SATURATION - 1`` points."""
    return np.minimum(1.0, np.log1p(n) / math.log(DENSITY_SATURATION))


def _cell_indices(xyz: np.ndarray, cfg: BevConfig):
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    (x0, x1), (y0, y1), (z0, z1) = cfg.x_range, cfg.y_range, cfg.z_range
    inside = (x >= x0) & (x < x1) & (y >= y0) & (y < y1) & (z >= z0) & (z < z1)
    x, y, z = x[inside], y[inside], z[inside]
    r = np.floor((x - x0) / cfg.resolution).astype(np.int64)
    c = np.floor((y - y0) / cfg.resolution).astype(np.int64)
    s = np.floor((z - z0) / cfg.slice_thickness).astype(np.int64)
    # Guard float rounding at the upper edges.
    np.clip(r, 0, cfg.rows - 1, out=r)
    np.clip(c, 0, cfg.cols - 1, out=c)
    np.clip(s, 0, cfg.num_slices - 1, out=s)
    return inside, r, c, s, z


def encode_bev(cloud: PointCloud, cfg: BevConfig = BevConfig()) -> BevGrid:
    M, R, C = cfg.num_slices, cfg.rows, cfg.cols
    data = np.zeros((M + 2, R, C))
    pts = np.asarray(cloud.points, dtype=np.float64)
    if len(pts) == 0:
        return BevGrid(data, cfg)
    inside, r, c, s, z = _cell_indices(pts[:, :3], cfg)
    if not inside.any():
        return BevGrid(data, cfg)
    inten = pts[inside, 3]
    cell = r * C + c

    floor = cfg.z_range[0] + s * cfg.slice_thickness
    hval = (z - floor) / cfg.slice_thickness
    hval = np.clip(hval, 0.0, 1.0)
    flat_h = data[:M].reshape(M, -1)
    np.maximum.at(flat_h, (s, cell), hval)

    # Intensity of the highest point per cell; ties resolved by max intensity
    # so the result does not depend on input order.
    order = np.lexsort((inten, z, cell))
    cs = cell[order]
    last = np.r_[cs[1:] != cs[:-1], True]
    data[M].reshape(-1)[cs[last]] = inten[order][last]

    counts = np.bincount(cell, minlength=R * C)
    data[M + 1].reshape(-1)[:] = density_value(counts)
    return BevGrid(data, cfg)


def cell_of(x: float, y: float, cfg: BevConfig = BevConfig()) -> tuple[int, int]:
    (x0, x1), (y0, y1) = cfg.x_range, cfg.y_range
    if not (x0 <= x < x1 and y0 <= y < y1):
        raise GridBoundsError(f"({x}, {y}) is outside the crop region")
    r = min(int(math.floor((x - x0) / cfg.resolution)), cfg.rows - 1)
    c = min(int(math.floor((y - y0) / cfg.resolution)), cfg.cols - 1)
    return r, c


def cell_center(row: int, col: int, cfg: BevConfig = BevConfig()) -> tuple[float, float]:
    if not (0 <= row < cfg.rows and 0 <= col < cfg.cols):
        raise GridBoundsError(f"cell ({row}, {col}) out of range")
    return (
        cfg.x_range[0] + (row + 0.5) * cfg.resolution,
        cfg.y_range[0] + (col + 0.5) * cfg.resolution,
    )


def dump_grid(grid: BevGrid, out_dir) -> list[Path]:
    """Write one row-major CSV per channel plus a ``bev_config.txt`` header."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"height_{k}" for k in range(grid.cfg.num_slices)] + ["intensity", "density"]
    paths = []
    header = out / "bev_config.txt"
    with open(header, "w") as f:
        for key, val in asdict(grid.cfg).items():
            f.write(f"{key} = {val}\n")
        f.write(f"channels = {','.join(names)}\n")
    paths.append(header)
    for name, chan in zip(names, grid.data):
        p = out / f"{name}.csv"
        np.savetxt(p, chan, delimiter=",", fmt="%.17g")
        paths.append(p)
    return paths
