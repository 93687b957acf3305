"""Fast invariant checks runnable without the test suite (``bayeslidar selftest``)."""

from __future__ import annotations

import math
import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from .geometry import Box3D, bev_iou, iou_3d
from .nnet import Batch, Network, TrainConfig, load_model, loss_and_grads, loss_reg_attenuated, save_model, smooth_l1
from .pointcloud import PointCloud, load_points, save_points
from .proposals import Anchor, decode_corners, encode_box
from .uncertainty import McSamples, aleatoric_variance, epistemic_total_variance, mutual_information, shannon_entropy

LN2 = math.log(2.0)


def _random_box(rng) -> Box3D:
    return Box3D(
        rng.uniform(5, 60), rng.uniform(-20, 20), rng.uniform(-1.5, -0.5),
        rng.uniform(1, 6), rng.uniform(0.5, 3), rng.uniform(0.5, 3), rng.uniform(-math.pi, math.pi),
    )


def check_estimator_bounds(rng, trials: int = 500) -> str:
    for _ in range(trials):
        n = int(rng.integers(1, 50))
        scores = rng.beta(0.5, 0.5, n) if rng.random() < 0.5 else np.round(rng.random(n))
        s = McSamples(scores, rng.normal(size=(n, 24)), rng.normal(size=(n, 24)))
        se, mi = shannon_entropy(s), mutual_information(s)
        tv = epistemic_total_variance(s)
        if not (0 <= mi <= se <= LN2 + 1e-12) or tv[0] < 0:
            return f"bound violated: se={se} mi={mi} tv={tv[0]}"
        if abs(tv[0] - sum(tv[1:])) > 1e-9 or aleatoric_variance(s).variance.min() <= 0:
            return "trace split or positivity violated"
    return ""


def check_geometry(rng, trials: int = 300) -> str:
    for _ in range(trials):
        a, b = _random_box(rng), _random_box(rng)
        if abs(iou_3d(a, a) - 1) > 1e-9:
            return "self IoU is not 1"
        if abs(iou_3d(a, b) - iou_3d(b, a)) > 1e-9 or not 0 <= bev_iou(a, b) <= 1:
            return "IoU symmetry or range violated"
        anchor = Anchor(b)
        if np.abs(decode_corners(encode_box(a, anchor), anchor) - a.corners()).max() > 1e-9:
            return "encode/decode round trip failed"
    return ""


def check_gradients(rng, trials: int = 3, h: float = 1e-5) -> str:
    cfg = TrainConfig(dropout_rate=0.0, weight_decay=1e-3)
    for t in range(trials):
        aleatoric = bool(t % 2)
        net = Network(5, (4, 3), aleatoric=aleatoric, dropout_rate=0.0, rng=int(rng.integers(1 << 31)))
        for p in net.params.values():
            p += rng.normal(scale=0.1, size=p.shape)  # zero biases put dead units on the ReLU kink
        batch = Batch(rng.normal(size=(6, 5)), rng.integers(0, 2, 6), rng.normal(scale=0.5, size=(6, 24)))
        _, grads = loss_and_grads(net, batch, cfg, mode="deterministic")
        for name, p in net.params.items():
            flat = p.reshape(-1)
            for i in rng.choice(flat.size, min(4, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + h
                up = loss_and_grads(net, batch, cfg, mode="deterministic")[0].total
                flat[i] = old - h
                down = loss_and_grads(net, batch, cfg, mode="deterministic")[0].total
                flat[i] = old
                num = (up - down) / (2 * h)
                ana = grads[name].reshape(-1)[i]
                if abs(num - ana) > 1e-4 * max(1.0, abs(num), abs(ana)):
                    return f"{name}[{i}]: analytic {ana} vs numeric {num}"
    return ""


def check_attenuation(rng) -> str:
    r = rng.uniform(0.05, 3.0, 24)
    lam = np.log(smooth_l1(r))
    base = float(loss_reg_attenuated(r, np.zeros(24), lam))
    for step in (1e-3, -1e-3):
        if float(loss_reg_attenuated(r, np.zeros(24), lam + step)) < base:
            return "attenuated loss not minimal at log rho"
    if abs(float(loss_reg_attenuated(r, np.zeros(24), np.zeros(24))) - 0.5 * smooth_l1(r).sum()) > 1e-12:
        return "loss at zero log-variance is not half smooth-L1"
    return ""


def check_file_formats(rng) -> str:
    with tempfile.TemporaryDirectory() as tmp:
        pts = np.column_stack([rng.normal(size=(50, 3)), rng.random(50)]).astype(np.float32)
        for name in ("c.blpc", "c.csv"):
            path = Path(tmp) / name
            save_points(PointCloud(pts), path)
            if not np.array_equal(load_points(path).points, pts):
                return f"{name} round trip differs"
        net = Network(6, (5,), aleatoric=True, rng=1)
        save_model(net, Path(tmp) / "m.blnn")
        back, _ = load_model(Path(tmp) / "m.blnn")
        if any(not np.array_equal(net.params[k], back.params[k]) for k in net.params):
            return "model round trip differs"
    return ""


CHECKS: dict[str, Callable] = {
    "estimator bounds": check_estimator_bounds,
    "geometry": check_geometry,
    "gradients": check_gradients,
    "loss attenuation": check_attenuation,
    "file formats": check_file_formats,
}


def run(seed: int = 0, echo=print) -> bool:
    ok = True
    for i, (name, fn) in enumerate(CHECKS.items()):
        problem = fn(np.random.default_rng([seed, i]))
        echo(f"{'PASS' if not problem else 'FAIL'} {name}{': ' + problem if problem else ''}")
        ok &= not problem
    return ok
