"""Disaggregation and on/off classification scores.

All scores expect de-normalized watts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

DEFAULT_SAE_HORIZON = 1200


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("empty input")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def sae(y, y_hat, M: int = DEFAULT_SAE_HORIZON) -> float:
    """Mean over ``floor(H/M)`` sub-horizons of the per-sample energy error.

    A trailing partial sub-horizon is dropped.
    """
    y, y_hat = _pair(y, y_hat)
    S = y.size // M
    if S == 0:
        raise ValueError(f"horizon {y.size} shorter than sub-horizon M={M}")
    cut = S * M
    err = np.abs(y[:cut].reshape(S, M).sum(1) - y_hat[:cut].reshape(S, M).sum(1)) / M
    return float(err.mean())


def f1(o, o_hat) -> float:
    """F1 on binary arrays; 0 when precision + recall is 0."""
    o = np.asarray(o).astype(bool)
    o_hat = np.asarray(o_hat).astype(bool)
    if o.shape != o_hat.shape:
        raise ValueError(f"length mismatch: {o.shape} vs {o_hat.shape}")
    tp = np.sum(o & o_hat)
    fp = np.sum(~o & o_hat)
    fn = np.sum(o & ~o_hat)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def improvement(baseline: float, new: float) -> float:
    """Relative reduction (percent) of ``new`` versus ``baseline``."""
    if baseline == 0:
        raise ValueError("baseline score must be non-zero")
    return (baseline - new) / baseline * 100.0


@dataclass
class EvalReport:
    appliances: List[str]
    mae: Dict[str, float]
    sae: Dict[str, float]
    f1: Dict[str, float]
    name: str = "model"
    baseline: Optional["EvalReport"] = None

    METRICS = ("mae", "sae", "f1")

    def average(self, metric: str) -> float:
        """Mean over appliances; ``metric`` is ``mae``, ``sae`` or ``f1`` (any case)."""
        vals = getattr(self, metric.lower())
        return float(np.mean([vals[a] for a in self.appliances]))

    def improvement(self, metric: str) -> Optional[float]:
        """Improvement of the average over the baseline; positive is better.

        For F1 (higher is better) the sign is flipped so that a gain is
        reported as a positive percentage.
        """
        if self.baseline is None:
            return None
        base, new = self.baseline.average(metric), self.average(metric)
        if base == 0:
            return None
        imp = improvement(base, new)
        return -imp if metric.lower() == "f1" else imp

    def rows(self) -> List[List[str]]:
        header = ["metric", "model"] + list(self.appliances) + ["Ave", "Imp"]
        out = [header]
        for metric in self.METRICS:
            vals = getattr(self, metric)
            imp = self.improvement(metric)
            out.append(
                [metric.upper(), self.name]
                + [f"{vals[a]:.6f}" for a in self.appliances]
                + [f"{self.average(metric):.6f}", "" if imp is None else f"{imp:.6f}"]
            )
        return out

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.rows())

    def format_table(self) -> str:
        rows = self.rows()
        for r in rows[1:]:
            for j in range(2, len(r)):
                if r[j]:
                    v = float(r[j])
                    r[j] = f"{v:.2f}%" if j == len(r) - 1 else f"{v:.2f}"
        widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)


def score(y, y_hat, o, o_hat_prob, appliances: Sequence[str], M: int = DEFAULT_SAE_HORIZON,
          name: str = "model", threshold: float = 0.5) -> EvalReport:
    """Build a report from rows of ``(appliance, time)`` arrays in watts.

    ``o_hat_prob`` is binarized at ``threshold``. If the horizon is shorter
    than ``M``, ``M`` shrinks to the horizon length.
    """
    y, y_hat = np.atleast_2d(y), np.atleast_2d(y_hat)
    o, o_hat = np.atleast_2d(o), np.atleast_2d(o_hat_prob) > threshold
    M = min(M, y.shape[1])
    return EvalReport(
        appliances=list(appliances),
        mae={a: mae(y[i], y_hat[i]) for i, a in enumerate(appliances)},
        sae={a: sae(y[i], y_hat[i], M) for i, a in enumerate(appliances)},
        f1={a: f1(o[i], o_hat[i]) for i, a in enumerate(appliances)},
        name=name,
    )
