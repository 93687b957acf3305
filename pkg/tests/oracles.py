"""Independent reference implementations used by the tests.

Everything here is written with plain Python loops and the ``math`` module
on purpose, so that it shares no code path with the vectorised library.
"""

import math

import numpy as np

EPS = 1e-7


def clamp(p, lo=EPS, hi=1 - EPS):
    return min(max(p, lo), hi)


def binary_entropy(p):
    p = clamp(p)
    return -p * math.log(p) - (1 - p) * math.log(1 - p)


def smooth_l1(r):
    return 0.5 * r * r if abs(r) < 1 else abs(r) - 0.5


def estimators(scores, boxes, log_vars=None):
    """Straight-line recomputation of every per-ROI estimator."""
    n = len(scores)
    pbar = sum(scores) / n
    se = binary_entropy(pbar)
    mi = max(se - sum(binary_entropy(s) for s in scores) / n, 0.0)
    mean = [sum(boxes[i][d] for i in range(n)) / n for d in range(24)]
    var = [sum((boxes[i][d] - mean[d]) ** 2 for i in range(n)) / n for d in range(24)]
    out = {
        "veh_prob": pbar, "se": se, "mi": mi, "mean_box": mean,
        "tv": (sum(var), sum(var[0:8]), sum(var[8:16]), sum(var[16:24])),
    }
    if log_vars is not None:
        sig = [math.exp(sum(log_vars[i][d] for i in range(n)) / n) for d in range(24)]
        out["sigma2"] = sig
        out["sigma_axes"] = (sum(sig[0:8]), sum(sig[8:16]), sum(sig[16:24]))
        dist = [math.sqrt(mean[k] ** 2 + mean[8 + k] ** 2 + mean[16 + k] ** 2) for k in range(8)]
        order = sorted(range(8), key=lambda k: (dist[k], k))
        per_corner = [sig[k] + sig[8 + k] + sig[16 + k] for k in range(8)]
        out["facing_sum"] = sum(per_corner[k] for k in order[:4])
        out["occluded_sum"] = sum(per_corner[k] for k in order[4:])
    return out


def total_loss(probs, labels, offsets, targets, log_vars, params, cls_w, reg_w, wd):
    """Scalar re-derivation of the weighted training objective."""
    B = len(labels)
    cls = sum(-math.log(clamp(probs[i][labels[i]])) for i in range(B)) / B
    pos = [i for i in range(B) if labels[i] == 1]
    reg = 0.0
    for i in pos:
        for d in range(24):
            rho = smooth_l1(offsets[i][d] - targets[i][d])
            if log_vars is None:
                reg += rho
            else:
                lam = min(max(log_vars[i][d], -10.0), 10.0)
                reg += 0.5 * math.exp(-lam) * rho + 0.5 * lam
    reg = reg / len(pos) if pos else 0.0
    decay = 0.5 * wd * sum(float((w * w).sum()) for k, w in params.items() if k.endswith(".W"))
    return cls_w * cls + reg_w * reg + decay


def mlp_loss_ld(params, n_hidden, x, labels, targets, cls_w, reg_w, wd):
    """Training objective of the ReLU MLP re-derived in extended precision.

    ``params`` maps names to ``np.longdouble`` arrays; the log-variance head is
    used when present. Working in long double pushes the rounding floor of a
    central difference well below the gradients being checked.
    """
    ld = np.longdouble
    a = np.asarray(x, dtype=ld)
    for k in range(n_hidden):
        a = np.maximum(a @ params[f"hidden{k}.W"] + params[f"hidden{k}.b"], ld(0))
    z = a @ params["cls.W"] + params["cls.b"]
    z = z - z.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    labels = np.asarray(labels)
    p = np.clip(probs[np.arange(len(labels)), labels], ld(1e-7), 1 - ld(1e-7))
    cls = -np.log(p).mean()
    pos = labels == 1
    r = (a @ params["reg.W"] + params["reg.b"] - np.asarray(targets, dtype=ld))[pos]
    ar = np.abs(r)
    rho = np.where(ar < 1, r * r / 2, ar - ld(0.5))
    if "logvar.W" in params:
        lam = np.clip((a @ params["logvar.W"] + params["logvar.b"])[pos], ld(-10), ld(10))
        rho = np.exp(-lam) * rho / 2 + lam / 2
    reg = rho.sum(axis=1).mean() if pos.any() else ld(0)
    decay = ld(wd) / 2 * sum((w * w).sum() for k, w in params.items() if k.endswith(".W"))
    return ld(cls_w) * cls + ld(reg_w) * reg + decay


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at every entry of array ``x``."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b, floor=1e-6):
    """Elementwise |a - b| / max(|a|, |b|, floor); the floor guards zero gradients."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def monte_carlo_iou(a, b, n=10**6, rng=None):
    """Volume IoU by uniform sampling of the joint bounding box."""
    rng = np.random.default_rng(rng)
    ca, cb = a.corners(), b.corners()
    both = np.vstack([ca, cb])
    lo, hi = both.min(axis=0), both.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 3))
    ina, inb = a.contains(pts), b.contains(pts)
    union = np.count_nonzero(ina | inb)
    return np.count_nonzero(ina & inb) / union if union else 0.0
