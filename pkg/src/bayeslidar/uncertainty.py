"""MC-dropout sampling and the classification / spatial uncertainty estimators.

Epistemic quantities come from the spread of ``N`` dropout forward passes:
vehicle probability, Shannon entropy, mutual information, the mean decoded
box and its total variance. Aleatoric quantities come from the predicted
log-variance head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nnet import BOX_DIM, Network, forward
from .proposals import Anchor, AnchorSet, to_sensor_frame

PROB_EPS = 1e-7
DEFAULT_PASSES = 40
DETECTION_THRESHOLD = 0.5
LN2 = math.log(2.0)


class UnsupportedOperationError(RuntimeError):
    pass


@dataclass
class McSamples:
    scores: np.ndarray  # (N,) vehicle softmax per pass
    boxes: np.ndarray  # (N, 24) decoded, sensor frame
    log_vars: np.ndarray | None = None  # (N, 24), offset space

    def __post_init__(self):
        self.scores = np.atleast_1d(np.asarray(self.scores, dtype=np.float64))
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, BOX_DIM)
        if len(self.scores) < 1 or len(self.boxes) != len(self.scores):
            raise ValueError("need N >= 1 scores and N boxes")
        if np.any((self.scores < 0) | (self.scores > 1)):
            raise ValueError("scores must lie in [0, 1]")
        if self.log_vars is not None:
            self.log_vars = np.asarray(self.log_vars, dtype=np.float64).reshape(-1, BOX_DIM)
            if len(self.log_vars) != len(self.scores):
                raise ValueError("need one log-variance row per pass")

    @property
    def n(self) -> int:
        return len(self.scores)


def _passes_mode(net: Network, dropout: bool) -> str:
    return "mc_dropout" if dropout and net.dropout_rate > 0 else "deterministic"


def mc_sample(net: Network, feature, anchor: Anchor, n: int = DEFAULT_PASSES, rng=None, dropout: bool = True) -> McSamples:
    """``n`` forward passes (with dropout unless disabled) for one ROI."""
    return mc_sample_batch(net, np.asarray(feature)[None, :], [anchor], n, rng, dropout)[0]


def mc_sample_batch(net: Network, features, anchors, n: int = DEFAULT_PASSES, rng=None, dropout: bool = True) -> list[McSamples]:
    """Vectorised :func:`mc_sample` over R ROIs; passes are ordered by index."""
    if n < 1:
        raise ValueError("need at least one pass")
    features = np.asarray(features, dtype=np.float64)
    R = len(features)
    if R == 0:
        return []
    mode = _passes_mode(net, dropout)
    if mode == "deterministic":
        n_eval = 1
    else:
        n_eval = n
        if rng is None:
            raise ValueError("MC dropout needs a random generator")
    # Rows are pass-major: pass i of ROI r sits at i * R + r.
    out = forward(net, np.tile(features, (n_eval, 1)), mode, rng)
    scores = out.vehicle_score.reshape(n_eval, R)
    offs = out.offsets.reshape(n_eval, R, BOX_DIM)
    lv = None if out.log_vars is None else out.log_vars.reshape(n_eval, R, BOX_DIM)
    if n_eval != n:
        scores = np.repeat(scores, n, axis=0)
        offs = np.repeat(offs, n, axis=0)
        lv = None if lv is None else np.repeat(lv, n, axis=0)
    a = anchors if isinstance(anchors, AnchorSet) else list(anchors)
    res = []
    for r in range(R):
        boxes = to_sensor_frame(offs[:, r], a[r])
        res.append(McSamples(scores[:, r], boxes, None if lv is None else lv[:, r]))
    return res


# --- classification estimators ---------------------------------------------


def _binary_entropy(p):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    return -p * np.log(p) - (1 - p) * np.log(1 - p)


def vehicle_prob(samples: McSamples) -> float:
    return float(np.mean(samples.scores))


def shannon_entropy(samples: McSamples) -> float:
    """Entropy (nats) of the mean vehicle probability; in [0, ln 2]."""
    return float(_binary_entropy(vehicle_prob(samples)))


def mutual_information(samples: McSamples) -> float:
    """Entropy of the mean minus the mean per-pass entropy, floored at 0."""
    mi = shannon_entropy(samples) - float(np.mean(_binary_entropy(samples.scores)))
    return max(mi, 0.0)


# --- spatial estimators ----------------------------------------------------


def mean_box(samples: McSamples) -> np.ndarray:
    return samples.boxes.mean(axis=0)


def epistemic_total_variance(samples: McSamples) -> tuple[float, float, float, float]:
    """Trace of the (1/N) sample covariance of the decoded boxes.

    Returns ``(total, x, y, z)`` where each axis term sums the variances of
    that axis' eight corner coordinates.
    """
    var = samples.boxes.var(axis=0)
    tx, ty, tz = (float(var[8 * k: 8 * k + 8].sum()) for k in range(3))
    return tx + ty + tz, tx, ty, tz


@dataclass
class AleatoricStats:
    variance: np.ndarray  # (24,)
    axis_sums: tuple[float, float, float]
    facing: tuple[int, ...]  # corner indices nearest the sensor
    facing_sum: float
    occluded_sum: float


def corner_groups(corners: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split 8 corners into the 4 nearest to the sensor and the other 4.

    Ties in distance go to the lower corner index.
    """
    d = np.linalg.norm(np.asarray(corners).reshape(8, 3), axis=1)
    order = np.lexsort((np.arange(8), d))
    return tuple(sorted(int(i) for i in order[:4])), tuple(sorted(int(i) for i in order[4:]))


def aleatoric_variance(samples: McSamples) -> AleatoricStats:
    """Per-dimension observation noise ``exp(mean log-variance)`` and its sums."""
    if samples.log_vars is None:
        raise UnsupportedOperationError("samples carry no log-variance predictions")
    var = np.exp(samples.log_vars.mean(axis=0))
    sx, sy, sz = (float(var[8 * k: 8 * k + 8].sum()) for k in range(3))
    corner_var = var.reshape(3, 8).sum(axis=0)  # per corner over x, y, z
    mb = mean_box(samples).reshape(3, 8).T
    facing, occluded = corner_groups(mb)
    return AleatoricStats(
        variance=var,
        axis_sums=(sx, sy, sz),
        facing=facing,
        facing_sum=float(corner_var[list(facing)].sum()),
        occluded_sum=float(corner_var[list(occluded)].sum()),
    )


# --- report ----------------------------------------------------------------


@dataclass
class UncertaintyReport:
    veh_prob: float
    se: float
    mi: float
    mean_box: np.ndarray
    epistemic_tv_total: float
    tv_x: float
    tv_y: float
    tv_z: float
    n_passes: int = 1
    aleatoric_var: np.ndarray | None = None
    aleatoric_var_x: float | None = None
    aleatoric_var_y: float | None = None
    aleatoric_var_z: float | None = None
    aleatoric_tv_total: float | None = None
    facing_sum: float | None = None
    occluded_sum: float | None = None

    @property
    def detected(self) -> bool:
        return self.veh_prob > DETECTION_THRESHOLD

    @property
    def has_aleatoric(self) -> bool:
        return self.aleatoric_var is not None

    def to_dict(self) -> dict:
        """JSON-ready dict; aleatoric fields are omitted (not null) when absent."""
        d = {
            "veh_prob": self.veh_prob,
            "se": self.se,
            "mi": self.mi,
            "mean_box": [float(v) for v in self.mean_box],
            "epistemic_tv_total": self.epistemic_tv_total,
            "tv_x": self.tv_x,
            "tv_y": self.tv_y,
            "tv_z": self.tv_z,
            "n_passes": self.n_passes,
            "detected": self.detected,
        }
        if self.has_aleatoric:
            d.update(
                aleatoric_var=[float(v) for v in self.aleatoric_var],
                aleatoric_var_x=self.aleatoric_var_x,
                aleatoric_var_y=self.aleatoric_var_y,
                aleatoric_var_z=self.aleatoric_var_z,
                aleatoric_tv_total=self.aleatoric_tv_total,
                facing_sum=self.facing_sum,
                occluded_sum=self.occluded_sum,
            )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> UncertaintyReport:
        kw = {k: d[k] for k in ("veh_prob", "se", "mi", "epistemic_tv_total", "tv_x", "tv_y", "tv_z")}
        kw["mean_box"] = np.asarray(d["mean_box"], dtype=np.float64)
        kw["n_passes"] = int(d.get("n_passes", 1))
        if "aleatoric_var" in d:
            kw["aleatoric_var"] = np.asarray(d["aleatoric_var"], dtype=np.float64)
            for k in ("aleatoric_var_x", "aleatoric_var_y", "aleatoric_var_z",
                      "aleatoric_tv_total", "facing_sum", "occluded_sum"):
                kw[k] = d[k]
        return cls(**kw)


def build_report(samples: McSamples, anchor: Anchor | None = None) -> UncertaintyReport:
    """Assemble every estimator for one ROI.

    ``anchor`` is accepted for interface symmetry with the sampler; samples
    are already in the sensor frame so it is not needed here.
    """
    tv = epistemic_total_variance(samples)
    rep = UncertaintyReport(
        veh_prob=vehicle_prob(samples),
        se=shannon_entropy(samples),
        mi=mutual_information(samples),
        mean_box=mean_box(samples),
        epistemic_tv_total=tv[0],
        tv_x=tv[1],
        tv_y=tv[2],
        tv_z=tv[3],
        n_passes=samples.n,
    )
    if samples.log_vars is not None:
        al = aleatoric_variance(samples)
        rep.aleatoric_var = al.variance
        rep.aleatoric_var_x, rep.aleatoric_var_y, rep.aleatoric_var_z = al.axis_sums
        rep.aleatoric_tv_total = float(sum(al.axis_sums))
        rep.facing_sum = al.facing_sum
        rep.occluded_sum = al.occluded_sum
    return rep
