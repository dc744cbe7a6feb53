"""Appliance operation-profile pool: extraction, scaling, sampling, storage.

Profiles are always stored in watts regardless of the source table's
normalization.

On disk a pool is a directory with one sub-directory per appliance. Each
sub-directory holds ``profile_NNNN.csv`` files (header
``sample_index,watts``) and a ``manifest.txt`` of ``key=value`` lines:
``appliance_id``, ``period_s``, the extraction parameters, and one
``file=<name>`` line per profile.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .series_store import AlignedTable

MODES = ("intact", "vertical", "horizontal", "mixed")
MIN_SCALE = 0.05


@dataclass(frozen=True)
class OperationProfile:
    appliance_id: str
    samples: np.ndarray
    period_s: int = 1

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size < 2:
            raise ValueError("a profile needs at least two samples")
        if np.any(s < 0):
            raise ValueError("profile power must be non-negative")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size


@dataclass
class AppliancePool:
    groups: Dict[str, List[OperationProfile]] = field(default_factory=dict)
    # extraction parameters per appliance, kept for the manifest
    params: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.groups.items():
            if not v:
                raise ValueError(f"appliance {k!r} has no profiles")

    @property
    def appliance_ids(self) -> List[str]:
        return list(self.groups)

    def __len__(self):
        return sum(len(v) for v in self.groups.values())

    def counts(self) -> Dict[str, int]:
        return {k: len(v) for k, v in self.groups.items()}


@dataclass(frozen=True)
class ScalingConfig:
    """``mode_pmf`` is ordered as :data:`MODES`."""

    sigma: float = 0.1
    mode_pmf: Mapping[str, Sequence[float]] = field(default_factory=dict)
    aug_prob: Mapping[str, float] = field(default_factory=dict)
    default_pmf: Sequence[float] = (0.25, 0.25, 0.25, 0.25)
    default_prob: float = 0.5

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        for pmf in [self.default_pmf, *self.mode_pmf.values()]:
            pmf = np.asarray(pmf, dtype=np.float64)
            if pmf.shape != (4,) or np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-9:
                raise ValueError(f"invalid mode pmf {pmf.tolist()}")
        for p in [self.default_prob, *self.aug_prob.values()]:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"augmentation probability {p} outside [0, 1]")

    def pmf(self, appliance_id: str) -> np.ndarray:
        return np.asarray(self.mode_pmf.get(appliance_id, self.default_pmf), dtype=np.float64)

    def prob(self, appliance_id: str) -> float:
        return float(self.aug_prob.get(appliance_id, self.default_prob))


def _on_runs(on: np.ndarray, max_gap: int):
    """Maximal on-runs, bridging off-gaps of at most ``max_gap`` samples."""
    idx = np.flatnonzero(on)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) - 1 > max_gap)
    starts = np.r_[idx[0], idx[breaks + 1]]
    stops = np.r_[idx[breaks], idx[-1]] + 1
    return list(zip(starts.tolist(), stops.tolist()))


def extract_profiles(
    table: AlignedTable,
    appliance_id: str,
    on_threshold: float = 15.0,
    min_on_s: float = 0,
    max_gap_s: float = 0,
) -> List[OperationProfile]:
    """Cut complete on-cycles out of one appliance column.

    ``on_threshold`` is in watts. A cycle is a maximal run above threshold
    (bridging internal gaps up to ``max_gap_s``) lasting at least
    ``min_on_s``; it is padded with one off-sample on each side. Cycles that
    touch the table edge are incomplete and skipped.
    """
    if appliance_id not in table.appliances:
        raise KeyError(f"unknown appliance {appliance_id!r}")
    watts = table.appliances[appliance_id] * table.norm_constant
    on = watts > on_threshold
    max_gap = int(max_gap_s // table.period_s)
    out = []
    for a, b in _on_runs(on, max_gap):
        if (b - a) * table.period_s < min_on_s:
            continue
        if a == 0 or b >= watts.size:
            continue
        out.append(OperationProfile(appliance_id, np.maximum(watts[a - 1 : b + 1], 0.0), table.period_s))
    return out


def build_pool(
    tables: Sequence[AlignedTable],
    appliance_ids: Sequence[str],
    thresholds: Mapping[str, float],
    min_on_s: Mapping[str, float] | float = 0,
    max_gap_s: Mapping[str, float] | float = 0,
) -> AppliancePool:
    """Extract profiles for each appliance; appliances with none are omitted."""

    def pick(v, k):
        return v.get(k, 0) if isinstance(v, Mapping) else v

    groups: Dict[str, List[OperationProfile]] = {}
    params: Dict[str, Dict[str, float]] = {}
    for a in appliance_ids:
        profiles = []
        for t in tables:
            profiles.extend(extract_profiles(t, a, thresholds[a], pick(min_on_s, a), pick(max_gap_s, a)))
        if profiles:
            groups[a] = profiles
            params[a] = {"threshold_w": float(thresholds[a]), "min_on_s": float(pick(min_on_s, a)),
                         "max_gap_s": float(pick(max_gap_s, a))}
    return AppliancePool(groups, params)


def draw_scale(rng: np.random.Generator, sigma: float) -> float:
    """N(1, sigma^2), redrawn until above :data:`MIN_SCALE`."""
    while True:
        v = rng.normal(1.0, sigma)
        if v > MIN_SCALE:
            return float(v)


def stretch(samples: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation of ``samples`` onto ``length`` evenly spaced positions."""
    src = np.arange(samples.size, dtype=np.float64)
    pos = np.linspace(0.0, samples.size - 1.0, length)
    return np.interp(pos, src, samples)


def scale_profile(
    p: OperationProfile,
    mode: str,
    rng: Optional[np.random.Generator] = None,
    sigma: float = 0.1,
    alpha: Optional[float] = None,
    beta: Optional[float] = None,
) -> OperationProfile:
    """Apply one modification mode; ``alpha``/``beta`` override the random draws."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    s = p.samples
    if mode in ("horizontal", "mixed"):
        b = beta if beta is not None else draw_scale(rng, sigma)
        s = stretch(s, max(2, int(round(s.size * b))))
    if mode in ("vertical", "mixed"):
        a = alpha if alpha is not None else draw_scale(rng, sigma)
        s = s * a
    return OperationProfile(p.appliance_id, np.maximum(s, 0.0), p.period_s)


def sample_profile(pool: AppliancePool, appliance_id: str, rng: np.random.Generator) -> OperationProfile:
    group = pool.groups.get(appliance_id)
    if not group:
        raise KeyError(f"no profiles for appliance {appliance_id!r}")
    return group[int(rng.integers(len(group)))]


# ---------------------------------------------------------------- storage


def save_pool(pool: AppliancePool, root: str) -> None:
    os.makedirs(root, exist_ok=True)
    for a, profiles in pool.groups.items():
        d = os.path.join(root, a)
        os.makedirs(d, exist_ok=True)
        lines = [f"appliance_id={a}", f"period_s={profiles[0].period_s}"]
        lines += [f"{k}={v!r}" for k, v in pool.params.get(a, {}).items()]
        for j, prof in enumerate(profiles):
            name = f"profile_{j:04d}.csv"
            with open(os.path.join(d, name), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["sample_index", "watts"])
                for i, v in enumerate(prof.samples):
                    w.writerow([i, repr(float(v))])
            lines.append(f"file={name}")
        with open(os.path.join(d, "manifest.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")


def load_pool(root: str) -> AppliancePool:
    groups: Dict[str, List[OperationProfile]] = {}
    params: Dict[str, Dict[str, float]] = {}
    for entry in sorted(os.listdir(root)):
        manifest = os.path.join(root, entry, "manifest.txt")
        if not os.path.isfile(manifest):
            continue
        files, meta = [], {}
        with open(manifest) as fh:
            for line in fh:
                k, _, v = line.strip().partition("=")
                if k == "file":
                    files.append(v)
                elif k:
                    meta[k] = v
        a = meta.get("appliance_id", entry)
        period = int(meta.get("period_s", 1))
        profiles = []
        for name in files:
            data = np.loadtxt(os.path.join(root, entry, name), delimiter=",", skiprows=1, ndmin=2)
            profiles.append(OperationProfile(a, data[:, 1], period))
        if profiles:
            groups[a] = profiles
            params[a] = {k: float(v) for k, v in meta.items() if k not in ("appliance_id", "period_s")}
    return AppliancePool(groups, params)
