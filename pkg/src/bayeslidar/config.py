"""Run configuration: a flat ``key = value`` INI file mapped onto the dataclasses.

Only keys listed in :data:`DOCS` are accepted. :func:`default_config_text`
renders every default with a one-line explanation, which doubles as the
reference for the file format.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .nnet import TrainConfig
from .pipeline import MODES, BenchmarkConfig


class ConfigError(ValueError):
    pass


# section -> key -> comment. Keys double as dataclass field names.
DOCS: dict[str, dict[str, str]] = {
    "run": {
        "seed": "master seed; every random stream is derived from it",
        "mode": "one of non_bayesian, epistemic, aleatoric, epistemic_aleatoric, or all",
    },
    "synth": {
        "n_train": "training scenes",
        "n_test": "test scenes",
        "min_vehicles": "fewest vehicles per scene",
        "max_vehicles": "most vehicles per scene",
        "x_range": "forward placement range of vehicle centers [m]",
        "y_range": "lateral placement range [m]",
        "length_range": "vehicle length range [m]",
        "width_range": "vehicle width range [m]",
        "height_range": "vehicle height range [m]",
        "yaw_range": "heading range [rad]",
        "density_range": "surface point density at 10 m [points / m^2]",
        "noise_sigma": "face-normal jitter of clean scenes [m]",
        "noisy_fraction": "share of training scenes scanned with noisy_sigma",
        "noisy_sigma": "jitter of the noisy training scenes [m]",
        "clutter_density": "ground clutter points per m^2 (0 disables)",
        "min_gap": "clearance kept between vehicle footprints [m]",
    },
    "bev": {
        "x_range": "grid extent forward [m]",
        "y_range": "grid extent lateral [m]",
        "z_range": "vertical extent split into height slices [m]",
        "resolution": "cell size [m]",
        "num_slices": "height slices M (grid has M + 2 channels)",
    },
    "proposals": {
        "stride": "anchor lattice stride [cells]",
        "bins": "ROI pooling bins per side",
        "top_k": "proposals kept per scene",
        "min_density": "least summed density for a proposal",
        "nms_iou": "BEV IoU suppressing overlapping proposals (1 disables)",
        "pos_iou": "anchor/gt BEV IoU for a vehicle target",
        "neg_iou": "anchor/gt BEV IoU below which an anchor is background",
        "jitter_per_gt": "extra training anchors scattered around each vehicle",
        "jitter_sigma": "std of their center offsets [m]",
        "neg_ratio": "background samples kept per vehicle sample",
    },
    "train": {
        "dropout_rate": "dropout after each hidden layer",
        "learning_rates": "Adam learning rate per phase",
        "steps": "steps per phase",
        "batch_size": "minibatch size",
        "weight_decay": "L2 coefficient on weight matrices",
        "cls_weight": "classification loss weight",
        "reg_weight": "regression loss weight",
        "log_every": "steps averaged into one log row",
    },
    "model": {
        "hidden": "hidden layer widths",
    },
    "detect": {
        "n_passes": "MC-dropout forward passes",
        "nms_iou": "BEV IoU suppressing overlapping detections",
    },
}


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "all"
    bench: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    @property
    def modes(self) -> tuple[str, ...]:
        return MODES if self.mode == "all" else (self.mode,)

    def train_config(self) -> TrainConfig:
        return replace(self.bench.train, rng_seed=self.seed)


def _targets(cfg: RunConfig) -> dict:
    b = cfg.bench
    return {"synth": b.synth, "bev": b.bev, "proposals": b.proposals, "train": b.train, "detect": b.detect}


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, like, where: str):
    try:
        if isinstance(like, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, tuple):
            items = [s for s in (p.strip() for p in text.split(",")) if s]
            kind = type(like[0]) if like else float
            return tuple(kind(s) for s in items)
        return type(like)(text.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r}") from None


def _apply(cfg: RunConfig, section: str, values: dict[str, str]) -> RunConfig:
    known = DOCS.get(section)
    if known is None:
        raise ConfigError(f"unknown section [{section}]")
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
    if section == "run":
        if "seed" in values:
            cfg.seed = _parse(values["seed"], 0, "run.seed")
        if "mode" in values:
            cfg.mode = values["mode"].strip()
        return cfg
    if section == "model":
        if "hidden" in values:
            cfg.bench.hidden = _parse(values["hidden"], (1,), "model.hidden")
        return cfg
    target = _targets(cfg)[section]
    kw = {k: _parse(v, getattr(target, k), f"{section}.{k}") for k, v in values.items()}
    try:
        new = replace(target, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None
    setattr(cfg.bench, section, new)
    return cfg


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.mode != "all" and cfg.mode not in MODES:
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    s, p, d = cfg.bench.synth, cfg.bench.proposals, cfg.bench.detect
    if s.n_train < 0 or s.n_test < 0 or not 0 <= s.min_vehicles <= s.max_vehicles:
        raise ConfigError("[synth] counts must be non-negative and ordered")
    if not 0 <= s.noisy_fraction <= 1:
        raise ConfigError("[synth] noisy_fraction must be in [0, 1]")
    if not 0 <= p.neg_iou < p.pos_iou <= 1:
        raise ConfigError("[proposals] need 0 <= neg_iou < pos_iou <= 1")
    if p.top_k < 1 or p.bins < 1 or p.stride < 1:
        raise ConfigError("[proposals] top_k, bins and stride must be positive")
    if d.n_passes < 1:
        raise ConfigError("[detect] n_passes must be positive")
    if not cfg.bench.hidden or min(cfg.bench.hidden) < 1:
        raise ConfigError("[model] hidden widths must be positive")
    return cfg


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = dataclasses.replace(base) if base else RunConfig()
    cfg.bench = dataclasses.replace(cfg.bench)
    for section in cp.sections():
        _apply(cfg, section, dict(cp.items(section)))
    return validate(cfg)


def load_config(path=None, seed: int | None = None, mode: str | None = None) -> RunConfig:
    """Defaults, overridden by the file at ``path``, overridden by the arguments."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = parse_config(text)
    if seed is not None:
        cfg.seed = seed
    if mode is not None:
        cfg.mode = mode
    return validate(cfg)


def default_config_text(cfg: RunConfig | None = None) -> str:
    """Render ``cfg`` (defaults if omitted) as a commented config file."""
    cfg = cfg or RunConfig()
    targets = _targets(cfg)
    lines = []
    for section, keys in DOCS.items():
        lines.append(f"[{section}]")
        for key, doc in keys.items():
            if section == "run":
                value = getattr(cfg, key)
            elif section == "model":
                value = cfg.bench.hidden
            else:
                value = getattr(targets[section], key)
            lines.append(f"{key} = {_fmt(value)}  # {doc}")
        lines.append("")
    return "\n".join(lines)
