"""A small dense network with dropout, two output heads and Adam.

The trunk is a stack of ReLU layers, each followed by (inverted) dropout.
On top sit a 2-way softmax classifier, a 24-d box-offset regressor and,
for heteroscedastic models, a 24-d log-variance head. Gradients are written
out by hand; ``tests/test_nnet.py`` checks them against finite differences.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_EPS = 1e-7
LOGVAR_CLAMP = 10.0
LOGVAR_BIAS_INIT = -3.0
BOX_DIM = 24

MODES = ("train", "mc_dropout", "deterministic")


class NumericError(ArithmeticError):
    """Non-finite activations, losses or gradients. ``where`` names the culprit."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


class ModelFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    dropout_rate: float = 0.5
    learning_rates: tuple[float, ...] = (1e-4, 1e-5)
    steps: tuple[int, ...] = (2000, 500)
    batch_size: int = 64
    weight_decay: float = 1e-4
    cls_weight: float = 1.0
    reg_weight: float = 0.05
    rng_seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if len(self.learning_rates) != len(self.steps):
            raise ValueError("one step count per learning-rate phase")
        if any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("learning rates must be positive")
        if min(self.cls_weight, self.reg_weight, self.weight_decay) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class HeadOutput:
    class_probs: np.ndarray  # (B, 2); column 1 is "vehicle"
    offsets: np.ndarray  # (B, 24)
    log_vars: np.ndarray | None = None  # (B, 24)
    logits: np.ndarray | None = None

    @property
    def vehicle_score(self) -> np.ndarray:
        return self.class_probs[:, 1]


class Network:
    """Dense trunk plus heads; parameters live in an ordered dict."""

    def __init__(
        self,
        input_size: int,
        hidden: tuple[int, ...] = (64, 64, 64),
        aleatoric: bool = False,
        dropout_rate: float = 0.5,
        rng: np.random.Generator | int | None = 0,
    ):
        if not 0 <= dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        rng = np.random.default_rng(rng)
        self.input_size = int(input_size)
        self.hidden = tuple(int(h) for h in hidden)
        self.aleatoric = bool(aleatoric)
        self.dropout_rate = float(dropout_rate)
        self.params: dict[str, np.ndarray] = {}
        fan_in = self.input_size
        for k, width in enumerate(self.hidden):
            lim = math.sqrt(6.0 / fan_in)  # He-uniform
            self.params[f"hidden{k}.W"] = rng.uniform(-lim, lim, (fan_in, width))
            self.params[f"hidden{k}.b"] = np.zeros(width)
            fan_in = width
        for name, out in self._head_shapes():
            lim = math.sqrt(6.0 / (fan_in + out))  # Glorot-uniform
            self.params[f"{name}.W"] = rng.uniform(-lim, lim, (fan_in, out))
            self.params[f"{name}.b"] = np.zeros(out)
        if self.aleatoric:
            self.params["logvar.b"][:] = LOGVAR_BIAS_INIT

    def _head_shapes(self):
        heads = [("cls", 2), ("reg", BOX_DIM)]
        if self.aleatoric:
            heads.append(("logvar", BOX_DIM))
        return heads

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_size,) + self.hidden

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> Network:
        other = object.__new__(Network)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite activations", where)


def forward(net: Network, x, mode: str = "deterministic", rng=None, _cache: list | None = None):
    """Run the network on a feature vector or a (B, D) batch.

    ``train`` and ``mc_dropout`` drop each hidden unit with probability
    ``net.dropout_rate`` and rescale survivors by ``1 / (1 - p)``;
    ``deterministic`` uses every unit unscaled.
    """
    # overflow surfaces as NumericError from _check, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(net, x, mode, rng, _cache)


def _forward(net: Network, x, mode: str, rng, _cache: list | None):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != net.input_size:
        raise ValueError(f"expected {net.input_size} features, got {a.shape[1]}")
    p = net.dropout_rate
    stochastic = mode != "deterministic" and p > 0
    if stochastic and rng is None:
        raise ValueError("a random generator is required for dropout modes")
    if _cache is not None:
        _cache.append(a)
    for k in range(len(net.hidden)):
        z = a @ net.params[f"hidden{k}.W"] + net.params[f"hidden{k}.b"]
        _check(z, f"hidden{k}")
        a = np.maximum(z, 0.0)
        mask = None
        if stochastic:
            mask = (rng.random(a.shape) >= p) / (1.0 - p)
            a = a * mask
        if _cache is not None:
            _cache.append((z, mask, a))
    logits = a @ net.params["cls.W"] + net.params["cls.b"]
    _check(logits, "cls")
    offsets = a @ net.params["reg.W"] + net.params["reg.b"]
    _check(offsets, "reg")
    log_vars = None
    if net.aleatoric:
        log_vars = a @ net.params["logvar.W"] + net.params["logvar.b"]
        _check(log_vars, "logvar")
    out = HeadOutput(softmax(logits), offsets, log_vars, logits)
    if single:
        out = HeadOutput(
            out.class_probs[0], out.offsets[0],
            None if log_vars is None else out.log_vars[0], out.logits[0],
        )
    return out


# --- losses ----------------------------------------------------------------


def smooth_l1(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    return np.where(a < 1.0, 0.5 * r * r, a - 0.5)


def smooth_l1_grad(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    return np.where(np.abs(r) < 1.0, r, np.sign(r))


def loss_cls(probs, label):
    """Cross-entropy ``-ln p[label]`` with probabilities clamped to [eps, 1-eps].

    Works on one probability pair or a (B, 2) batch with (B,) labels.
    """
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label)
    if probs.ndim == 1:
        return float(-math.log(min(max(probs[int(label)], PROB_EPS), 1 - PROB_EPS)))
    p = probs[np.arange(len(probs)), label.astype(np.int64)]
    return -np.log(np.clip(p, PROB_EPS, 1 - PROB_EPS))


def loss_reg_smooth_l1(v, v_gt):
    return np.sum(smooth_l1(np.asarray(v) - np.asarray(v_gt)), axis=-1)


def loss_reg_attenuated(v, v_gt, log_vars):
    """Elementwise heteroscedastic loss: sum of 1/2 e^-lam rho(r) + 1/2 lam."""
    lam = np.clip(np.asarray(log_vars, dtype=np.float64), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    rho = smooth_l1(np.asarray(v) - np.asarray(v_gt))
    return np.sum(0.5 * np.exp(-lam) * rho + 0.5 * lam, axis=-1)


@dataclass
class Batch:
    features: np.ndarray  # (B, D)
    labels: np.ndarray  # (B,) 1 vehicle, 0 background
    offsets: np.ndarray  # (B, 24); rows of negatives are ignored

    def __len__(self):
        return len(self.labels)

    @property
    def positive(self) -> np.ndarray:
        return self.labels == 1


@dataclass
class LossBreakdown:
    total: float
    cls: float
    reg: float
    decay: float


def decay_term(net: Network, cfg: TrainConfig) -> float:
    if cfg.weight_decay == 0:
        return 0.0
    s = sum(float(np.sum(w * w)) for k, w in net.params.items() if k.endswith(".W"))
    return 0.5 * cfg.weight_decay * s


def total_loss(out: HeadOutput, batch: Batch, cfg: TrainConfig, net: Network | None = None) -> LossBreakdown:
    """Weighted classification + regression (positives only) + weight decay."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    cls = float(np.mean(loss_cls(out.class_probs, batch.labels)))
    pos = batch.positive
    reg = 0.0
    if pos.any():
        if out.log_vars is not None:
            per = loss_reg_attenuated(out.offsets[pos], batch.offsets[pos], out.log_vars[pos])
        else:
            per = loss_reg_smooth_l1(out.offsets[pos], batch.offsets[pos])
        reg = float(np.mean(per))
    decay = decay_term(net, cfg) if net is not None else 0.0
    total = cfg.cls_weight * cls + cfg.reg_weight * reg + decay
    return LossBreakdown(total, cls, reg, decay)


def loss_and_grads(net: Network, batch: Batch, cfg: TrainConfig, rng=None, mode: str = "train"):
    """Total loss and its exact gradient w.r.t. every parameter.

    The dropout masks sampled in the forward pass are reused in the backward
    pass, so the gradient belongs to the sampled sub-network.
    """
    cache: list = []
    out = forward(net, batch.features, mode, rng, _cache=cache)
    losses = total_loss(out, batch, cfg, net)
    B = len(batch)
    grads: dict[str, np.ndarray] = {}

    # Classification head: d(-ln p_y)/dz = p - onehot, zero where clamped.
    probs = out.class_probs
    y = batch.labels.astype(np.int64)
    py = probs[np.arange(B), y]
    active = (py > PROB_EPS) & (py < 1 - PROB_EPS)
    dlogits = probs.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits *= (active * cfg.cls_weight / B)[:, None]

    pos = batch.positive
    npos = int(pos.sum())
    doffsets = np.zeros_like(out.offsets)
    dlogvars = None if out.log_vars is None else np.zeros_like(out.log_vars)
    if npos:
        r = out.offsets[pos] - batch.offsets[pos]
        scale = cfg.reg_weight / npos
        if out.log_vars is None:
            doffsets[pos] = scale * smooth_l1_grad(r)
        else:
            lam = out.log_vars[pos]
            inside = np.abs(lam) < LOGVAR_CLAMP
            w = np.exp(-np.clip(lam, -LOGVAR_CLAMP, LOGVAR_CLAMP))
            doffsets[pos] = scale * 0.5 * w * smooth_l1_grad(r)
            dlogvars[pos] = scale * inside * (0.5 - 0.5 * w * smooth_l1(r))

    top = cache[-1][2]
    grads["cls.W"] = top.T @ dlogits
    grads["cls.b"] = dlogits.sum(axis=0)
    grads["reg.W"] = top.T @ doffsets
    grads["reg.b"] = doffsets.sum(axis=0)
    da = dlogits @ net.params["cls.W"].T + doffsets @ net.params["reg.W"].T
    if dlogvars is not None:
        grads["logvar.W"] = top.T @ dlogvars
        grads["logvar.b"] = dlogvars.sum(axis=0)
        da += dlogvars @ net.params["logvar.W"].T

    for k in reversed(range(len(net.hidden))):
        z, mask, _ = cache[k + 1]
        below = cache[k] if k == 0 else cache[k][2]
        if mask is not None:
            da = da * mask
        dz = da * (z > 0)
        grads[f"hidden{k}.W"] = below.T @ dz
        grads[f"hidden{k}.b"] = dz.sum(axis=0)
        if k:
            da = dz @ net.params[f"hidden{k}.W"].T

    if cfg.weight_decay:
        for name in grads:
            if name.endswith(".W"):
                grads[name] = grads[name] + cfg.weight_decay * net.params[name]
    return losses, {k: grads[k] for k in net.params}


# --- optimisation ----------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_network(cls, net: Network) -> AdamState:
        return cls(
            m={k: np.zeros_like(p) for k, p in net.params.items()},
            v={k: np.zeros_like(p) for k, p in net.params.items()},
        )


def backward_and_step(
    net: Network,
    batch: Batch,
    cfg: TrainConfig,
    state: AdamState,
    lr: float,
    rng=None,
) -> LossBreakdown:
    """One Adam step on ``batch``; parameters are updated in place."""
    losses, grads = loss_and_grads(net, batch, cfg, rng)
    if not math.isfinite(losses.total):
        raise NumericError("non-finite loss", "total_loss")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", name)
    if not state.m:
        zero = AdamState.for_network(net)
        state.m, state.v = zero.m, zero.v
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        net.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return losses


def fit(net: Network, data: Batch, cfg: TrainConfig, state: AdamState | None = None, on_log=None):
    """Minibatch training over the phases in ``cfg``.

    Returns ``(log_rows, state)`` where each row is
    ``(step, lr, total, cls, reg, decay)`` averaged over the last
    ``cfg.log_every`` steps. ``on_log(row, net)`` is called per row.
    """
    state = state or AdamState.for_network(net)
    rng = np.random.default_rng(cfg.rng_seed)
    n = len(data)
    order = rng.permutation(n)
    cursor = 0
    rows = []
    acc = np.zeros(4)
    seen = 0
    step = 0
    for lr, n_steps in zip(cfg.learning_rates, cfg.steps):
        for _ in range(n_steps):
            if cursor + cfg.batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            idx = np.sort(order[cursor: cursor + cfg.batch_size])
            cursor += cfg.batch_size
            batch = Batch(data.features[idx], data.labels[idx], data.offsets[idx])
            losses = backward_and_step(net, batch, cfg, state, lr, rng)
            acc += (losses.total, losses.cls, losses.reg, losses.decay)
            seen += 1
            step += 1
            if seen == cfg.log_every:
                row = (step, lr, *(acc / seen))
                rows.append(row)
                if on_log is not None:
                    on_log(row, net)
                acc[:] = 0
                seen = 0
    if seen:
        row = (step, cfg.learning_rates[-1], *(acc / seen))
        rows.append(row)
        if on_log is not None:
            on_log(row, net)
    return rows, state


# --- model files -----------------------------------------------------------

MODEL_MAGIC = b"BLNN"
MODEL_VERSION = 1
_HEAD = struct.Struct("<4sIIdI")


def save_model(net: Network, path, state: AdamState | None = None):
    """Write architecture, parameters and (optionally) Adam state."""
    sizes = net.layer_sizes
    buf = bytearray(_HEAD.pack(MODEL_MAGIC, MODEL_VERSION, int(net.aleatoric), net.dropout_rate, len(sizes)))
    buf += struct.pack(f"<{len(sizes)}I", *sizes)
    for p in net.params.values():
        buf += p.astype("<f8").tobytes()
    if state is None or not state.m:
        buf += struct.pack("<B", 0)
    else:
        buf += struct.pack("<BQddd", 1, state.t, state.beta1, state.beta2, state.eps)
        for k in net.params:
            buf += state.m[k].astype("<f8").tobytes()
        for k in net.params:
            buf += state.v[k].astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_model(path) -> tuple[Network, AdamState | None]:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise ModelFormatError("truncated header")
    magic, version, flags, p, nsizes = _HEAD.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    off = _HEAD.size
    if nsizes < 1 or len(data) < off + 4 * nsizes:
        raise ModelFormatError("truncated layer-size table")
    sizes = struct.unpack_from(f"<{nsizes}I", data, off)
    off += 4 * nsizes
    net = Network(sizes[0], tuple(sizes[1:]), aleatoric=bool(flags & 1), dropout_rate=p, rng=0)

    def read_block(shape):
        nonlocal off
        nbytes = 8 * int(np.prod(shape))
        if len(data) < off + nbytes:
            raise ModelFormatError("truncated parameter block")
        arr = np.frombuffer(data, dtype="<f8", count=int(np.prod(shape)), offset=off)
        off += nbytes
        return arr.reshape(shape).astype(np.float64)

    for k, v in net.params.items():
        net.params[k] = read_block(v.shape)
    if len(data) < off + 1:
        raise ModelFormatError("missing optimizer block")
    (has_state,) = struct.unpack_from("<B", data, off)
    off += 1
    state = None
    if has_state:
        if len(data) < off + 32:
            raise ModelFormatError("truncated optimizer block")
        t, b1, b2, eps = struct.unpack_from("<Qddd", data, off)
        off += 32
        m = {k: read_block(v.shape) for k, v in net.params.items()}
        v_ = {k: read_block(v.shape) for k, v in net.params.items()}
        state = AdamState(b1, b2, eps, t, m, v_)
    if off != len(data):
        raise ModelFormatError(f"{len(data) - off} unexpected trailing bytes")
    return net, state
