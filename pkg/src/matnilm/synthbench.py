"""Synthetic households with known ground truth.

aggregate = sum(appliances) + unmodeled + noise, clamped at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .series_store import AlignedTable

DAY_S = 86400
SHAPES = ("rectangular", "two-stage", "spike-train")


@dataclass(frozen=True)
class ApplianceTemplate:
    """One appliance and its schedule process.

    rectangular: periodic duty cycle; on for ``cycle_len`` (+-``len_jitter``)
    samples, then off for ``off_len`` (+-``off_jitter``) samples.
    spike-train: Poisson arrivals at ``events_per_day``; each burst lasts
    ``cycle_len`` (+-``len_jitter``) samples at constant power.
    two-stage: Poisson arrivals like spike-train; the first ``stage_split``
    fraction of a cycle runs at ``on_power``, the rest at
    ``on_power * second_stage``.
    """

    id: str
    shape: str
    on_power: float
    cycle_len: int
    len_jitter: int = 0
    off_len: int = 0
    off_jitter: int = 0
    events_per_day: float = 0.0
    min_gap: int = 20
    stage_split: float = 0.5
    second_stage: float = 0.4

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown cycle shape {self.shape!r}")
        if not self.on_power > 0:
            raise ValueError("on_power must be positive")
        if self.cycle_len - self.len_jitter < 2:
            raise ValueError("cycle length must stay >= 2")


@dataclass(frozen=True)
class SyntheticHouse:
    templates: Sequence[ApplianceTemplate]
    baseline_w: float = 80.0
    walk_sigma_w: float = 0.5
    walk_reversion: float = 0.002
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.baseline_w < 0 or self.walk_sigma_w < 0 or self.noise_sigma < 0:
            raise ValueError("baseline and sigmas must be non-negative")


@dataclass
class SyntheticTrace:
    table: AlignedTable
    unmodeled: np.ndarray
    noise: np.ndarray
    schedule: Dict[str, List[Tuple[int, int]]]

    def unclamped_aggregate(self) -> np.ndarray:
        return sum(self.table.appliances.values()) + self.unmodeled + self.noise


def _periodic_schedule(t: ApplianceTemplate, n: int, rng) -> List[Tuple[int, int]]:
    out = []
    pos = int(rng.integers(0, t.cycle_len + t.off_len + 1))
    while True:
        length = t.cycle_len + int(rng.integers(-t.len_jitter, t.len_jitter + 1))
        if pos + length >= n:
            break
        out.append((pos, pos + length))
        pos += length + max(2, t.off_len + int(rng.integers(-t.off_jitter, t.off_jitter + 1)))
    return out


def _poisson_schedule(t: ApplianceTemplate, n: int, period_s: int, rng) -> List[Tuple[int, int]]:
    rate = t.events_per_day * period_s / DAY_S  # events per sample
    out = []
    pos = 0
    while rate > 0:
        pos += max(t.min_gap, int(rng.exponential(1.0 / rate)))
        length = t.cycle_len + int(rng.integers(-t.len_jitter, t.len_jitter + 1))
        if pos + length >= n:
            break
        out.append((pos, pos + length))
        pos += length
    return out


def _trace(t: ApplianceTemplate, schedule, n: int) -> np.ndarray:
    y = np.zeros(n)
    for a, b in schedule:
        y[a:b] = t.on_power
        if t.shape == "two-stage":
            y[a + max(1, int(round((b - a) * t.stage_split))) : b] = t.on_power * t.second_stage
    return y


def generate(house: SyntheticHouse, duration_s: int, period_s: int = 3, start_ts: float = 0.0) -> SyntheticTrace:
    """Simulate ``duration_s`` seconds of one house at ``period_s`` resolution."""
    n = int(duration_s // period_s)
    if n < 1:
        raise ValueError("duration shorter than one period")
    seq = np.random.SeedSequence(house.seed)
    streams = [np.random.default_rng(s) for s in seq.spawn(len(house.templates) + 2)]

    appliances, schedule = {}, {}
    for t, rng in zip(house.templates, streams):
        if t.shape == "rectangular":
            sched = _periodic_schedule(t, n, rng)
        else:
            sched = _poisson_schedule(t, n, period_s, rng)
        schedule[t.id] = sched
        appliances[t.id] = _trace(t, sched, n)

    # mean-reverting walk around the baseline, kept non-negative
    walk_rng, noise_rng = streams[-2], streams[-1]
    steps = walk_rng.normal(0.0, house.walk_sigma_w, n)
    u = np.empty(n)
    level = house.baseline_w
    for i in range(n):
        level += steps[i] - house.walk_reversion * (level - house.baseline_w)
        level = max(level, 0.0)
        u[i] = level
    eps = noise_rng.normal(0.0, house.noise_sigma, n) if house.noise_sigma > 0 else np.zeros(n)

    aggregate = np.maximum(sum(appliances.values()) + u + eps, 0.0) if appliances else np.maximum(u + eps, 0.0)
    table = AlignedTable(period_s=period_s, start_ts=start_ts, aggregate=aggregate,
                         appliances=appliances, source=f"synthbench(seed={house.seed})")
    return SyntheticTrace(table, u, eps, schedule)


def default_templates() -> List[ApplianceTemplate]:
    """Cycling fridge and a bursty microwave, at 3 s resolution."""
    return [
        ApplianceTemplate("fridge", "rectangular", on_power=50.0, cycle_len=120, len_jitter=30,
                          off_len=240, off_jitter=60),
        ApplianceTemplate("microwave", "spike-train", on_power=1200.0, cycle_len=40, len_jitter=25,
                          events_per_day=12.0, min_gap=200),
    ]


def default_house(seed: int = 0) -> SyntheticHouse:
    return SyntheticHouse(default_templates(), seed=seed)


@dataclass
class BenchmarkSplit:
    train: List[AlignedTable]
    val: List[AlignedTable]
    test: List[AlignedTable]
    trace: SyntheticTrace


def default_benchmark(seed: int = 0, train_days: int = 1, val_days: int = 1, test_days: int = 3,
                      period_s: int = 3) -> BenchmarkSplit:
    """Consecutive days of one house split into train / validation / test."""
    days = train_days + val_days + test_days
    trace = generate(default_house(seed), days * DAY_S, period_s)
    per_day = DAY_S // period_s
    day_tables = [trace.table.rows(d * per_day, (d + 1) * per_day) for d in range(days)]
    return BenchmarkSplit(
        train=day_tables[:train_days],
        val=day_tables[train_days : train_days + val_days],
        test=day_tables[train_days + val_days :],
        trace=trace,
    )
