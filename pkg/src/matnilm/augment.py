"""On-the-fly sample augmentation of training batches."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .pool import MODES, AppliancePool, ScalingConfig, sample_profile, scale_profile
from .windows import Sample, StatusRule, derive_status


def place_signal(
    signal: np.ndarray, T: int, w: int, threshold: float, rng: np.random.Generator
) -> np.ndarray:
    """Fit ``signal`` into a length-``T`` window.

    A signal shorter than ``T`` is zero-padded at a uniform random offset,
    restricted to offsets where at least half of its on-samples fall inside
    the output span ``[w, T - w)`` (the best-overlapping offsets if none
    qualify). A longer signal is cut to a uniform random length-``T`` slice.
    """
    l = signal.size
    if l >= T:
        start = int(rng.integers(l - T + 1))
        return signal[start : start + T].copy()
    on = (signal > threshold).astype(np.int64)
    n_on = int(on.sum())
    offsets = np.arange(T - l + 1)
    if n_on:
        csum = np.r_[0, np.cumsum(on)]
        lo = np.clip(w - offsets, 0, l)
        hi = np.clip(T - w - offsets, 0, l)
        overlap = csum[hi] - csum[lo]
        ok = 2 * overlap >= n_on
        if not ok.any():
            ok = overlap == overlap.max()
        offsets = offsets[ok]
    off = int(offsets[rng.integers(offsets.size)])
    out = np.zeros(T)
    out[off : off + l] = signal
    return out


def augment_sample(
    sample: Sample,
    pool: AppliancePool,
    cfg: ScalingConfig,
    rule: StatusRule,
    rng: np.random.Generator,
    targets: Sequence[str],
    norm_constant: float = 1.0,
) -> Sample:
    x = sample.x.copy()
    y_span = sample.y_span.copy()
    y_c = sample.y_c.copy()
    T, w = sample.T, sample.w
    index = {a: k for k, a in enumerate(targets)}
    touched = False
    for a in pool.appliance_ids:
        if rng.random() >= cfg.prob(a):
            continue
        touched = True
        prof = sample_profile(pool, a, rng)
        mode = MODES[int(rng.choice(4, p=cfg.pmf(a)))]
        prof = scale_profile(prof, mode, rng, cfg.sigma)
        sig = place_signal(prof.samples, T, w, rule.threshold_w(a), rng) / norm_constant
        k = index.get(a)
        if k is not None:
            x -= y_span[k]
            y_span[k] = sig
            y_c[k] = derive_status(sig[w : T - w], rule.threshold(a, norm_constant))
        x += sig
    if not touched:
        return sample
    np.maximum(x, 0.0, out=x)
    return Sample(x, y_span, y_c, sample.t0, w)


def augment_batch(
    batch: Sequence[Sample],
    pool: AppliancePool,
    cfg: ScalingConfig,
    rule: StatusRule,
    rng: np.random.Generator,
    *,
    targets: Sequence[str],
    distractors: Sequence[str] = (),
    norm_constant: float = 1.0,
) -> List[Sample]:
    """Return a new, augmented batch; the input batch is left untouched.

    Pool appliances listed in ``targets`` have their label replaced and the
    aggregate corrected; ``distractors`` only add load to the aggregate.
    Every sample draws from its own child stream of ``rng``.
    """
    known = set(targets) | set(distractors)
    unknown = [a for a in pool.appliance_ids if a not in known]
    if unknown:
        raise ValueError(f"pool appliances neither targets nor distractors: {unknown}")
    streams = rng.spawn(len(batch))
    return [
        augment_sample(s, pool, cfg, rule, r, targets, norm_constant)
        for s, r in zip(batch, streams)
    ]
