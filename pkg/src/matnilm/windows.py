"""Sliding-window dataset construction and on/off status targets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .series_store import AlignedTable

DEFAULT_ON_THRESHOLD_W = 15.0


@dataclass(frozen=True)
class WindowSpec:
    """Input length ``T``, context margin ``w`` and step ``s`` (all in samples)."""

    T: int
    w: int
    s: int
    appliance_order: Sequence[str]

    def __post_init__(self):
        if not (self.T > 2 * self.w >= 0):
            raise ValueError(f"need T > 2w >= 0, got T={self.T}, w={self.w}")
        if self.s < 1:
            raise ValueError("step must be >= 1")
        if not self.appliance_order:
            raise ValueError("appliance_order is empty")
        object.__setattr__(self, "appliance_order", tuple(self.appliance_order))

    @property
    def output_len(self) -> int:
        return self.T - 2 * self.w

    @classmethod
    def from_lengths(cls, T: int, output_len: int, s: Optional[int] = None, appliance_order=()):
        if (T - output_len) % 2:
            raise ValueError("T - output_len must be even")
        return cls(T=T, w=(T - output_len) // 2, s=s or output_len, appliance_order=appliance_order)


@dataclass(frozen=True)
class StatusRule:
    """Per-appliance on thresholds in watts (before normalization)."""

    on_threshold_w: Dict[str, float] = field(default_factory=dict)
    default_w: float = DEFAULT_ON_THRESHOLD_W

    def __post_init__(self):
        if self.default_w < 0 or any(v < 0 for v in self.on_threshold_w.values()):
            raise ValueError("thresholds must be >= 0")

    def threshold_w(self, appliance_id: str) -> float:
        return float(self.on_threshold_w.get(appliance_id, self.default_w))

    def threshold(self, appliance_id: str, norm_constant: float = 1.0) -> float:
        """Threshold in the units of a table normalized by ``norm_constant``."""
        return self.threshold_w(appliance_id) / norm_constant


def derive_status(y_row, threshold: float) -> np.ndarray:
    """1 where power exceeds ``threshold``, else 0."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    return (np.asarray(y_row) > threshold).astype(np.uint8)


@dataclass(frozen=True)
class Sample:
    """One training instance.

    ``y_span`` holds the target appliances over the full input span
    (``|K| x T``); ``y`` is its centred output slice. Keeping the full span
    lets augmentation subtract a replaced appliance exactly at every input
    position.
    """

    x: np.ndarray
    y_span: np.ndarray
    y_c: np.ndarray
    t0: int
    w: int

    @property
    def y(self) -> np.ndarray:
        return self.y_span[:, self.w : self.y_span.shape[1] - self.w]

    @property
    def T(self) -> int:
        return self.x.shape[0]


def window_count(L: int, T: int, s: int) -> int:
    return (L - T) // s + 1 if L >= T else 0


class WindowDataset:
    """Ordered windows over one or more tables.

    Arrays are materialized once; items are read-only views.
    """

    def __init__(self, x, y_span, t0, spec: WindowSpec, thresholds: np.ndarray, norm_constant: float):
        self.x = np.ascontiguousarray(x, dtype=np.float64)
        self.y_span = np.ascontiguousarray(y_span, dtype=np.float64)
        self.t0 = np.asarray(t0, dtype=np.int64)
        self.spec = spec
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        self.norm_constant = float(norm_constant)
        out = self.y_span[:, :, spec.w : spec.T - spec.w]
        self.y_c = (out > self.thresholds[None, :, None]).astype(np.uint8)
        for arr in (self.x, self.y_span, self.y_c):
            arr.setflags(write=False)

    def __len__(self):
        return self.x.shape[0]

    @property
    def y(self) -> np.ndarray:
        return self.y_span[:, :, self.spec.w : self.spec.T - self.spec.w]

    def __getitem__(self, i) -> Sample:
        return Sample(self.x[i], self.y_span[i], self.y_c[i], int(self.t0[i]), self.spec.w)

    def samples(self, indices) -> List[Sample]:
        return [self[int(i)] for i in indices]

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def concat(cls, parts: Sequence["WindowDataset"]) -> "WindowDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("no windows to concatenate")
        first = parts[0]
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y_span for p in parts]),
            np.concatenate([p.t0 for p in parts]),
            first.spec,
            first.thresholds,
            first.norm_constant,
        )


def build_windows(table: AlignedTable, spec: WindowSpec, rule: StatusRule = StatusRule()) -> WindowDataset:
    """Windows starting at ``0, s, 2s, ...`` that fit inside the table."""
    L = len(table)
    if L < spec.T:
        raise ValueError(f"table has {L} rows, shorter than window length T={spec.T}")
    n = window_count(L, spec.T, spec.s)
    starts = np.arange(n) * spec.s
    idx = starts[:, None] + np.arange(spec.T)[None, :]
    x = table.aggregate[idx]
    cols = np.stack([table.column(a) for a in spec.appliance_order])  # K x L
    y_span = cols[:, idx].transpose(1, 0, 2)
    thresholds = np.array([rule.threshold(a, table.norm_constant) for a in spec.appliance_order])
    return WindowDataset(x, y_span, starts, spec, thresholds, table.norm_constant)
