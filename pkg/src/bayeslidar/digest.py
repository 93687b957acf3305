"""Directional comparisons between detector modes and their markdown digest."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .evaluation import EvalSummary, MatchedDetection

MODE_LABELS = {
    "non_bayesian": "Non-Bayesian (baseline)",
    "epistemic": "Epistemic",
    "aleatoric": "Aleatoric",
    "epistemic_aleatoric": "Epistemic+Aleatoric",
}
F1_PAIR = (0.3, 0.5)
LOW_IOU, HIGH_IOU = 0.3, 0.7
EPISTEMIC_F1_SLACK = 0.03
ALEATORIC_PCC_MIN = 0.3
EPISTEMIC_PCC_MAX = 0.2
OCCLUDED_FRACTION_MIN = 0.7


@dataclass
class Check:
    name: str
    detail: str
    passed: bool | None  # None: not evaluable with the given runs


def mean_f1(s: EvalSummary, thresholds=F1_PAIR) -> float:
    return float(np.mean([s.f1_at(t) for t in thresholds]))


def iou_band_means(matched: Sequence[MatchedDetection], name: str, low=LOW_IOU, high=HIGH_IOU):
    """Mean of report field ``name`` over IoU < ``low`` and over IoU > ``high``."""
    lo = [getattr(m.report, name) for m in matched if m.iou < low]
    hi = [getattr(m.report, name) for m in matched if m.iou > high]
    return (float(np.mean(lo)) if lo else None, float(np.mean(hi)) if hi else None)


def _f(v, fmt=".3f") -> str:
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else format(v, fmt)


def mode_checks(summaries: Mapping[str, EvalSummary]) -> list[Check]:
    """Directional mode comparisons on one run; missing modes give ``None``."""
    checks = []
    base = summaries.get("non_bayesian")
    b = mean_f1(base) if base else None
    for mode in ("epistemic", "aleatoric", "epistemic_aleatoric"):
        label = f"{MODE_LABELS[mode]} vs {MODE_LABELS['non_bayesian']}"
        s = summaries.get(mode)
        if s is None or base is None:
            checks.append(Check(label, "mode not run", None))
            continue
        m = mean_f1(s)
        if mode == "epistemic":
            ok = abs(m - b) <= EPISTEMIC_F1_SLACK
            rule = f"within {EPISTEMIC_F1_SLACK:g} of the baseline"
        else:
            ok = m >= b
            rule = "at least the baseline"
        checks.append(Check(label, f"mean F1@{{0.3,0.5}} {m:.3f} vs {b:.3f}, expected {rule}", ok))

    for mode in ("epistemic", "epistemic_aleatoric"):
        s = summaries.get(mode)
        for name in ("se", "mi"):
            label = f"{MODE_LABELS[mode]}: {name.upper()} lower at IoU > {HIGH_IOU:g} than at IoU < {LOW_IOU:g}"
            if s is None:
                checks.append(Check(label, "mode not run", None))
                continue
            lo, hi = iou_band_means(s.matched, name)
            ok = None if lo is None or hi is None else hi < lo
            checks.append(Check(label, f"{_f(hi, '.4f')} vs {_f(lo, '.4f')}", ok))

    for mode in ("epistemic", "epistemic_aleatoric"):
        s = summaries.get(mode)
        label = f"{MODE_LABELS[mode]}: |PCC(distance, epistemic TV)| < {EPISTEMIC_PCC_MAX:g}"
        v = None if s is None else s.pcc.get("epistemic_all")
        checks.append(Check(label, "mode not run" if s is None else f"PCC {_f(v)}",
                            None if v is None else abs(v) < EPISTEMIC_PCC_MAX))
    for mode in ("aleatoric", "epistemic_aleatoric"):
        s = summaries.get(mode)
        label = f"{MODE_LABELS[mode]}: PCC(distance, aleatoric variance) > {ALEATORIC_PCC_MIN:g}"
        v = None if s is None else s.pcc.get("aleatoric_all")
        checks.append(Check(label, "mode not run" if s is None else f"PCC {_f(v)}",
                            None if v is None else v > ALEATORIC_PCC_MIN))
        label = f"{MODE_LABELS[mode]}: occluded corners noisier than facing corners"
        v = None if s is None else s.occluded_fraction
        checks.append(Check(label, "mode not run" if s is None else
                            f"fraction {_f(v)} of true positives, expected >= {OCCLUDED_FRACTION_MIN:g}",
                            None if v is None else v >= OCCLUDED_FRACTION_MIN))
    return checks


def render_digest(summaries: Mapping[str, EvalSummary], checks: Sequence[Check] | None = None) -> str:
    checks = mode_checks(summaries) if checks is None else checks
    lines = ["# Detection and uncertainty digest", "", "## F1 by mode", ""]
    lines.append("| mode | F1@0.3 | F1@0.5 | mean | detections |")
    lines.append("|---|---|---|---|---|")
    for mode, label in MODE_LABELS.items():
        s = summaries.get(mode)
        if s is None:
            lines.append(f"| {label} | not run | | | |")
        else:
            lines.append(f"| {label} | {s.f1_at(0.3):.3f} | {s.f1_at(0.5):.3f} | {mean_f1(s):.3f} | {s.n_detections} |")
    lines += ["", "## Directional checks", ""]
    for c in checks:
        mark = {True: "PASS", False: "FAIL", None: "SKIP"}[c.passed]
        lines.append(f"- **{mark}** {c.name}: {c.detail}")
    lines.append("")
    return "\n".join(lines)
