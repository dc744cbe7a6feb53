"""Command-line front end.

Exit codes: 0 success, 2 user or configuration error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .experiment import (
    ConfigError,
    flatten_predictions,
    load_config,
    run_experiment,
    windows,
)
from .metrics import DEFAULT_SAE_HORIZON, score
from .plotting import plot_report
from .pool import build_pool, save_pool
from .series_store import (
    PreprocessConfig,
    TableError,
    merge_channels,
    normalize,
    read_channel_file,
    read_merged_csv,
    read_table,
    segment_table,
    write_table,
)
from .synthbench import default_benchmark
from .trainer import TrainingDiverged, predict, read_history
from .windows import StatusRule, WindowSpec, derive_status

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("matnilm")


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- preprocess


def cmd_preprocess(args) -> int:
    channels = []
    for path in args.input or []:
        channels.extend(read_merged_csv(path))
    for spec in args.channel or []:
        name, sep, path = spec.partition("=")
        if not sep:
            raise UsageError(f"--channel expects NAME=PATH, got {spec!r}")
        channels.append(read_channel_file(path, name))
    if not channels:
        raise UsageError("no input given (use --input or --channel)")
    cfg = PreprocessConfig(gap_limit=args.gap_limit, stuck_limit=args.stuck_limit,
                           min_duration_s=args.min_duration, norm_constant=args.norm_constant)
    merged = merge_channels(channels, args.period)
    segments = segment_table(merged, cfg)
    os.makedirs(args.out, exist_ok=True)
    print(f"{len(segments)} segment(s) from {len(merged)} aligned rows")
    for i, seg in enumerate(segments):
        name = f"segment_{i:03d}.csv"
        write_table(normalize(seg, cfg.norm_constant), os.path.join(args.out, name))
        print(f"  {name}  start_ts={seg.start_ts:g}  rows={len(seg)}  duration_s={seg.duration_s}")
    return EXIT_OK


# ---------------------------------------------------------------- build-pool


def _thresholds(values: List[str], appliances: List[str]) -> dict:
    """``--threshold`` values: plain watts apply to all, ``NAME=watts`` to one."""
    default, named = 15.0, {}
    for v in values or []:
        name, sep, w = v.rpartition("=")
        try:
            w = float(w)
        except ValueError:
            raise UsageError(f"bad --threshold value {v!r}") from None
        if not sep:
            default = w
        elif name in appliances:
            named[name] = w
        else:
            raise UsageError(f"--threshold names unknown appliance {name!r}")
    return {a: named.get(a, default) for a in appliances}


def cmd_build_pool(args) -> int:
    tables = [read_table(p) for p in args.tables]
    for a in args.appliance:
        if not any(a in t.appliances for t in tables):
            raise UsageError(f"unknown appliance {a!r} (not a column of the given tables)")
    thresholds = _thresholds(args.threshold, args.appliance)
    pool = build_pool(tables, args.appliance, thresholds,
                      min_on_s=args.min_on, max_gap_s=args.max_gap)
    counts = pool.counts()
    for a in args.appliance:
        if a not in counts:
            print(f"warning: no operation profiles found for {a}; group omitted", file=sys.stderr)
    save_pool(pool, args.out)
    for a, c in counts.items():
        print(f"{a}: {c} profile(s)")
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = args.out if args.out is not None else ""
    res = run_experiment(cfg, out_dir=out)
    print(res.report.format_table())
    print(f"checkpoint: {res.checkpoint_path}")
    print(f"history: {res.history_path}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def _load_tables(paths, norm_constant: float):
    tables = []
    for p in paths:
        t = read_table(p)
        if t.norm_constant == 1.0:
            t = normalize(t, norm_constant)
        tables.append(t)
    return tables


def cmd_evaluate(args) -> int:
    M = args.sae_horizon
    history = read_history(args.history) if args.history else None
    if args.predictions:
        # score a stored estimate against the reference table, row by row
        truth = [read_table(p) for p in args.table]
        if len(truth) != 1:
            raise UsageError("--predictions scores exactly one --table")
        truth = truth[0]
        pred = read_table(args.predictions)
        if len(pred) != len(truth):
            raise UsageError("prediction and reference tables differ in length")
        apps = [a for a in truth.appliances if a in pred.appliances]
        if not apps:
            raise UsageError("prediction table shares no appliance columns with the reference")
        rule = StatusRule(default_w=args.threshold)
        y = np.stack([truth.column(a) for a in apps]) * truth.norm_constant
        y_hat = np.stack([pred.column(a) for a in apps]) * pred.norm_constant
        o = np.stack([derive_status(y[i], rule.threshold_w(a)) for i, a in enumerate(apps)])
        o_hat = np.stack([derive_status(y_hat[i], rule.threshold_w(a)) for i, a in enumerate(apps)])
        report = score(y, y_hat, o, o_hat.astype(float), apps, M=M, name="predictions")
        aggregate = truth.aggregate * truth.norm_constant
        period = truth.period_s
    else:
        if not args.checkpoint:
            raise UsageError("give --checkpoint or --predictions")
        ck = load_checkpoint(args.checkpoint)
        apps = list(ck.meta.get("appliances") or [f"app{i}" for i in range(ck.config.n_appliances)])
        rule = StatusRule(dict(ck.meta.get("thresholds_w", {})), args.threshold)
        model = ck.build()
        tables = _load_tables(args.table, ck.norm_constant)
        for t in tables:
            missing = [a for a in apps if a not in t.appliances]
            if missing:
                raise UsageError(f"table lacks appliance columns {missing}")
        spec = WindowSpec.from_lengths(ck.config.input_len, ck.config.output_len, None, apps)
        data = windows(tables, spec, rule)
        _, on_prob, y_hat = predict(model, data)
        c = data.norm_constant
        y = flatten_predictions(data, data.y) * c
        y_hat = flatten_predictions(data, y_hat) * c
        report = score(y, y_hat, flatten_predictions(data, data.y_c), flatten_predictions(data, on_prob),
                       apps, M=M, name=ck.meta.get("scenario", "model"))
        aggregate = data.x[:, spec.w : spec.T - spec.w].reshape(-1) * c
        period = tables[0].period_s
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    report.to_csv(args.report)
    plot_path = args.plot or os.path.splitext(args.report)[0] + ".png"
    plot_report(plot_path, apps, y, y_hat, aggregate=aggregate, history=history, period_s=period)
    print(report.format_table())
    print(f"report: {args.report}")
    print(f"plot: {plot_path}")
    return EXIT_OK


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    b = default_benchmark(args.seed, train_days=args.train_days, val_days=args.val_days,
                          test_days=args.test_days)
    os.makedirs(args.out, exist_ok=True)
    for split in ("train", "val", "test"):
        for i, t in enumerate(getattr(b, split)):
            p = os.path.join(args.out, f"{split}_{i:02d}.csv")
            write_table(t, p)
            print(p)
    return EXIT_OK


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matnilm", description="Multi-appliance NILM with sample augmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("preprocess", help="align, clean, segment and normalize raw channels")
    pp.add_argument("--input", action="append", help="merged CSV (timestamp, aggregate, appliances...)")
    pp.add_argument("--channel", action="append", help="NAME=PATH of a two-column channel file")
    pp.add_argument("--period", type=int, default=3, help="alignment period in seconds")
    pp.add_argument("--gap-limit", type=int, default=20, help="missing samples that split a segment")
    pp.add_argument("--stuck-limit", type=int, default=1200, help="identical samples treated as stuck")
    pp.add_argument("--min-duration", type=int, default=3600, help="shortest kept segment, seconds")
    pp.add_argument("--norm-constant", type=float, default=612.0)
    pp.add_argument("--out", required=True, help="output directory")
    pp.set_defaults(func=cmd_preprocess)

    bp = sub.add_parser("build-pool", help="extract operation profiles into a pool directory")
    bp.add_argument("--tables", nargs="+", required=True)
    bp.add_argument("--appliance", action="append", required=True)
    bp.add_argument("--threshold", action="append", help="watts, or NAME=watts (default 15)")
    bp.add_argument("--min-on", type=int, default=6, help="shortest activation, seconds")
    bp.add_argument("--max-gap", type=int, default=0, help="off gap merged into one activation, seconds")
    bp.add_argument("--out", required=True)
    bp.set_defaults(func=cmd_build_pool)

    tp = sub.add_parser("train", help="run one experiment config")
    tp.add_argument("--config", required=True)
    tp.add_argument("--out", help="output directory (default: output.dir from the config)")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("evaluate", help="score a checkpoint (or stored predictions) on tables")
    ep.add_argument("--checkpoint")
    ep.add_argument("--predictions", help="table of estimated appliance power instead of a model")
    ep.add_argument("--table", nargs="+", required=True)
    ep.add_argument("--report", required=True, help="report CSV path")
    ep.add_argument("--plot", help="figure path (default: report path with .png)")
    ep.add_argument("--history", help="training history CSV for the convergence panel")
    ep.add_argument("--threshold", type=float, default=15.0, help="on threshold in watts")
    ep.add_argument("--sae-horizon", type=int, default=DEFAULT_SAE_HORIZON)
    ep.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("synth", help="write the synthetic benchmark as table files")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--train-days", type=int, default=1)
    sp.add_argument("--val-days", type=int, default=1)
    sp.add_argument("--test-days", type=int, default=3)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"{exc}" + (f" [key: {exc.key}]" if exc.key and exc.key not in str(exc) else ""))
        return EXIT_USAGE
    except (UsageError, TableError, CheckpointError, KeyError, ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except TrainingDiverged as exc:
        _err(f"training diverged: {exc}")
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
