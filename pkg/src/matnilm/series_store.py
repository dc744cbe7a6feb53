"""Channel ingestion, alignment, cleaning and normalization.

Tables are immutable containers; every operation returns a new table.

File formats
------------
* channel file: two whitespace- or comma-separated columns
  ``epoch_seconds watts``, no header.
* merged CSV: header ``timestamp,aggregate,<appliance ids...>``; empty cells
  are missing readings.
* aligned-table file: CSV with the merged header, plus a sidecar
  ``<file>.meta`` holding ``key=value`` lines (``period_s``,
  ``norm_constant``, ``source``, ``start_ts``).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional

import numpy as np

AGGREGATE = "aggregate"


class TableError(ValueError):
    """Raised on invalid channel or table input."""


@dataclass(frozen=True)
class RawChannel:
    appliance_id: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        vals = np.asarray(self.values, dtype=np.float64)
        if ts.ndim != 1 or ts.shape != vals.shape:
            raise TableError(f"channel {self.appliance_id!r}: timestamps and values differ in shape")
        if ts.size and np.any(np.diff(ts) <= 0):
            raise TableError(f"channel {self.appliance_id!r}: timestamps not strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class AlignedTable:
    """Aggregate plus per-appliance power on a regular grid.

    ``missing`` maps a column name to a boolean mask of unobserved rows; it is
    ``None`` once the table is clean. ``norm_constant`` records the divisor
    already applied to every column (1.0 for raw watts).
    """

    period_s: int
    start_ts: float
    aggregate: np.ndarray
    appliances: Dict[str, np.ndarray]
    missing: Optional[Dict[str, np.ndarray]] = None
    norm_constant: float = 1.0
    source: str = ""

    def __post_init__(self):
        if self.period_s <= 0:
            raise TableError("period_s must be positive")
        n = len(self.aggregate)
        if n < 1:
            raise TableError("table must have at least one row")
        for name, col in self.appliances.items():
            if len(col) != n:
                raise TableError(f"column {name!r} has length {len(col)}, expected {n}")

    def __len__(self):
        return len(self.aggregate)

    @property
    def columns(self) -> List[str]:
        return [AGGREGATE] + list(self.appliances)

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_ts + self.period_s * np.arange(len(self), dtype=np.float64)

    @property
    def duration_s(self) -> int:
        return len(self) * self.period_s

    def column(self, name: str) -> np.ndarray:
        if name == AGGREGATE:
            return self.aggregate
        try:
            return self.appliances[name]
        except KeyError:
            raise KeyError(f"unknown appliance {name!r}") from None

    def rows(self, start: int, stop: int) -> "AlignedTable":
        """Row slice ``[start, stop)`` as a new table."""
        missing = None
        if self.missing is not None:
            missing = {k: v[start:stop].copy() for k, v in self.missing.items()}
        return replace(
            self,
            start_ts=self.start_ts + start * self.period_s,
            aggregate=self.aggregate[start:stop].copy(),
            appliances={k: v[start:stop].copy() for k, v in self.appliances.items()},
            missing=missing,
        )


@dataclass(frozen=True)
class PreprocessConfig:
    gap_limit: int = 20
    stuck_limit: int = 1200
    min_duration_s: int = 3600
    norm_constant: float = 612.0

    def __post_init__(self):
        for name in ("gap_limit", "stuck_limit", "min_duration_s", "norm_constant"):
            if getattr(self, name) <= 0:
                raise TableError(f"{name} must be strictly positive")


def merge_channels(channels: Iterable[RawChannel], period_s: int) -> AlignedTable:
    """Align channels onto one grid of ``period_s`` bins.

    Bins start at the latest channel start and end at the earliest channel
    end. Each bin takes the last observation falling inside it; bins without
    an observation are flagged in ``missing``.
    """
    channels = list(channels)
    aggregates = [c for c in channels if c.appliance_id == AGGREGATE]
    if len(aggregates) != 1:
        raise TableError("exactly one 'aggregate' channel is required")
    if period_s <= 0:
        raise TableError("period_s must be positive")
    if any(c.timestamps.size == 0 for c in channels):
        raise TableError("empty intersection of channel time ranges")
    start = max(c.timestamps[0] for c in channels)
    stop = min(c.timestamps[-1] for c in channels)
    if stop < start:
        raise TableError("empty intersection of channel time ranges")
    n_rows = int(np.floor((stop - start) / period_s)) + 1

    values: Dict[str, np.ndarray] = {}
    missing: Dict[str, np.ndarray] = {}
    for ch in channels:
        keep = (ch.timestamps >= start) & (ch.timestamps < start + n_rows * period_s)
        ts, vals = ch.timestamps[keep], ch.values[keep]
        bins = np.floor((ts - start) / period_s).astype(np.int64)
        col = np.zeros(n_rows)
        seen = np.zeros(n_rows, dtype=bool)
        # timestamps increase, so the last write per bin wins
        last = np.r_[bins[1:] != bins[:-1], True] if bins.size else np.zeros(0, dtype=bool)
        col[bins[last]] = vals[last]
        seen[bins[last]] = True
        bad = ~np.isfinite(col)
        col[bad] = 0.0
        values[ch.appliance_id] = col
        missing[ch.appliance_id] = ~seen | bad

    appliances = {c.appliance_id: values[c.appliance_id] for c in channels if c.appliance_id != AGGREGATE}
    return AlignedTable(
        period_s=int(period_s),
        start_ts=float(start),
        aggregate=values[AGGREGATE],
        appliances=appliances,
        missing={k: missing[k] for k in [AGGREGATE] + list(appliances)},
        source="merged",
    )


def _runs(flags: np.ndarray):
    """Yield ``(start, stop)`` of maximal True runs."""
    if flags.size == 0:
        return
    padded = np.r_[False, flags, False].astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    for a, b in zip(edges[::2], edges[1::2]):
        yield int(a), int(b)


def _long_missing_rows(mask: np.ndarray, limit: int) -> np.ndarray:
    bad = np.zeros(mask.shape, dtype=bool)
    for a, b in _runs(mask):
        if b - a >= limit:
            bad[a:b] = True
    return bad


def _stuck_rows(col: np.ndarray, limit: int) -> np.ndarray:
    bad = np.zeros(col.shape, dtype=bool)
    if col.size < limit:
        return bad
    change = np.flatnonzero(np.diff(col) != 0) + 1
    starts = np.r_[0, change]
    stops = np.r_[change, col.size]
    for a, b in zip(starts, stops):
        if b - a >= limit:
            bad[a:b] = True
    return bad


def _backfill(col: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill masked entries with the next observed value; trailing gaps stay masked."""
    out = col.copy()
    idx = np.where(~mask, np.arange(col.size), col.size)
    nxt = np.minimum.accumulate(idx[::-1])[::-1]
    fillable = mask & (nxt < col.size)
    out[fillable] = col[nxt[fillable]]
    return out


def _fill_segment(table: AlignedTable, start: int, stop: int):
    """Backfill rows ``[start, stop)``; returns (filled columns, usable stop)."""
    cols = {}
    end = stop
    for name in table.columns:
        col = table.column(name)[start:stop]
        mask = table.missing[name][start:stop] if table.missing else np.zeros(col.size, dtype=bool)
        cols[name] = _backfill(col, mask)
        observed = np.flatnonzero(~mask)
        end = min(end, start + (observed[-1] + 1 if observed.size else 0))
    return cols, end


def segment_table(table: AlignedTable, cfg: PreprocessConfig = PreprocessConfig()) -> List[AlignedTable]:
    """Split on long gaps and stuck runs, backfill, and drop short segments.

    Order: rows inside a run of ``>= gap_limit`` missing values (any column)
    are removed first. Each remaining piece is backfilled and rows inside a
    run of ``>= stuck_limit`` identical values (any column, on the filled
    values) are removed. Surviving pieces are backfilled from their own rows
    only; trailing rows that cannot be backfilled are trimmed; pieces shorter
    than ``min_duration_s`` are discarded.
    """
    n = len(table)
    names = table.columns
    gap_bad = np.zeros(n, dtype=bool)
    if table.missing is not None:
        for name in names:
            gap_bad |= _long_missing_rows(table.missing[name], cfg.gap_limit)

    pieces = []
    for a, b in _runs(~gap_bad):
        cols, end = _fill_segment(table, a, b)
        stuck = np.zeros(b - a, dtype=bool)
        for name in names:
            stuck[: end - a] |= _stuck_rows(cols[name][: end - a], cfg.stuck_limit)
        stuck[end - a :] = True
        for sa, sb in _runs(~stuck):
            pieces.append((a + sa, a + sb))

    segments = []
    for a, b in pieces:
        cols, end = _fill_segment(table, a, b)
        length = end - a
        if length <= 0 or length * table.period_s < cfg.min_duration_s:
            continue
        # refill can only shorten a piece, never create a new stuck run
        segments.append(
            AlignedTable(
                period_s=table.period_s,
                start_ts=table.start_ts + a * table.period_s,
                aggregate=cols[AGGREGATE][:length],
                appliances={k: cols[k][:length] for k in table.appliances},
                missing=None,
                norm_constant=table.norm_constant,
                source=table.source,
            )
        )
    return segments


def normalize(table: AlignedTable, norm_constant: float = 612.0) -> AlignedTable:
    """Divide every power column by ``norm_constant``."""
    if not norm_constant > 0:
        raise TableError("norm_constant must be positive")
    return replace(
        table,
        aggregate=table.aggregate / norm_constant,
        appliances={k: v / norm_constant for k, v in table.appliances.items()},
        norm_constant=table.norm_constant * norm_constant,
    )


def denormalize(table: AlignedTable) -> AlignedTable:
    """Undo every normalization recorded on the table."""
    c = table.norm_constant
    return replace(
        table,
        aggregate=table.aggregate * c,
        appliances={k: v * c for k, v in table.appliances.items()},
        norm_constant=1.0,
    )


def preprocess(channels: Iterable[RawChannel], period_s: int, cfg: PreprocessConfig = PreprocessConfig()):
    """merge -> segment -> normalize."""
    merged = merge_channels(channels, period_s)
    return [normalize(seg, cfg.norm_constant) for seg in segment_table(merged, cfg)]


# ---------------------------------------------------------------- file I/O


def read_channel_file(path: str, appliance_id: Optional[str] = None) -> RawChannel:
    if appliance_id is None:
        appliance_id = os.path.splitext(os.path.basename(path))[0]
    with open(path) as fh:
        text = fh.read().replace(",", " ")
    if not text.strip():
        raise TableError(f"{path}: empty channel file")
    data = np.loadtxt(text.splitlines(), ndmin=2)
    if data.shape[1] != 2:
        raise TableError(f"{path}: expected two columns")
    return RawChannel(appliance_id, data[:, 0], data[:, 1])


def read_merged_csv(path: str) -> List[RawChannel]:
    """Read a merged CSV into one channel per column, dropping empty cells."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TableError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if len(header) < 2 or header[0] != "timestamp" or AGGREGATE not in header:
        raise TableError(f"{path}: header must start with 'timestamp' and include 'aggregate'")
    if not rows:
        raise TableError(f"{path}: no data rows")
    ts = np.array([float(r[0]) for r in rows])
    channels = []
    for j, name in enumerate(header[1:], start=1):
        vals = np.array([float(r[j]) if j < len(r) and r[j].strip() else np.nan for r in rows])
        ok = np.isfinite(vals)
        channels.append(RawChannel(name, ts[ok], vals[ok]))
    return channels


def _fmt(v: float) -> str:
    return repr(float(v))


def write_table(table: AlignedTable, path: str) -> None:
    """Write ``path`` (CSV) and ``path.meta`` (key=value sidecar)."""
    cols = table.columns
    data = [table.column(c) for c in cols]
    ts = table.timestamps
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + cols)
        for i in range(len(table)):
            row = [_fmt(ts[i])]
            for name, col in zip(cols, data):
                if table.missing is not None and table.missing[name][i]:
                    row.append("")
                else:
                    row.append(_fmt(col[i]))
            w.writerow(row)
    write_meta(path + ".meta", {
        "period_s": table.period_s,
        "norm_constant": _fmt(table.norm_constant),
        "source": table.source,
        "start_ts": _fmt(table.start_ts),
    })


def write_meta(path: str, meta: Dict[str, object]) -> None:
    with open(path, "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")


def read_meta(path: str) -> Dict[str, str]:
    meta = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                meta[k.strip()] = v.strip()
    return meta


def read_table(path: str) -> AlignedTable:
    """Read an aligned-table CSV written by :func:`write_table`."""
    meta_path = path + ".meta"
    meta = read_meta(meta_path) if os.path.exists(meta_path) else {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TableError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if header[:2] != ["timestamp", AGGREGATE] or not rows:
        raise TableError(f"{path}: not an aligned-table file")
    raw = np.array([[float(c) if c.strip() else np.nan for c in r] for r in rows])
    ts = raw[:, 0]
    if "period_s" in meta:
        period = int(meta["period_s"])
    elif len(ts) > 1:
        period = int(round(ts[1] - ts[0]))
    else:
        raise TableError(f"{path}: cannot infer period_s")
    missing = {name: ~np.isfinite(raw[:, j + 1]) for j, name in enumerate(header[1:])}
    vals = np.nan_to_num(raw[:, 1:], nan=0.0)
    has_missing = any(m.any() for m in missing.values())
    return AlignedTable(
        period_s=period,
        start_ts=float(ts[0]),
        aggregate=vals[:, 0].copy(),
        appliances={name: vals[:, j + 1].copy() for j, name in enumerate(header[2:])},
        missing=missing if has_missing else None,
        norm_constant=float(meta.get("norm_constant", 1.0)),
        source=meta.get("source", os.path.basename(path)),
    )
