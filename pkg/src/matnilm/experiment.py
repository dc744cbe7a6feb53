"""Declarative experiment configs and the scenario runner.

A config is INI text read with :mod:`configparser`. ``[section]`` headers
prefix the keys that follow (``[train]`` then ``seed = 1`` is
``train.seed``), keys before the first header are top-level, ``#`` starts a
comment, and list values are comma separated. Unknown keys are rejected by
name.

Scenarios on the synthetic benchmark:

* ``S1``: all labeled training days (``data.s1_train_days``), no augmentation.
* ``S2``: one labeled training day, no augmentation.
* ``S3``: one labeled training day plus sample augmentation from a pool
  extracted from that day (or loaded from ``data.pool``).

``sa.enabled`` overrides the scenario's augmentation switch, which is how
the SA ablation axis is expressed.
"""

from __future__ import annotations

import configparser
import os
import textwrap
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .metrics import DEFAULT_SAE_HORIZON, EvalReport, score
from .model import ModelConfig, build_model, configure_ablation
from .pool import AppliancePool, ScalingConfig, build_pool, load_pool
from .series_store import AlignedTable, normalize, read_table
from .synthbench import default_benchmark
from .trainer import Augmentation, TrainConfig, TrainResult, predict, train, write_history
from .windows import StatusRule, WindowDataset, WindowSpec, build_windows

DATA_ROOT_ENV = "MATNILM_DATA_ROOT"
SCENARIOS = ("S1", "S2", "S3")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "on", "yes"):
        return True
    if s in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str):
    return tuple(int(p) for p in v.split(",") if p.strip())


def _floats(v: str):
    return tuple(float(p) for p in v.split(",") if p.strip())


def _strs(v: str):
    return tuple(p.strip() for p in v.split(",") if p.strip())


# key -> (parser, default). Defaults are the desk-scale settings.
SCHEMA: Dict[str, tuple] = {
    "scenario": (str, "S3"),
    "name": (str, "matnilm"),
    "data.source": (str, "synthbench"),
    "data.seed": (int, 0),
    "data.s1_train_days": (int, 3),
    "data.val_days": (int, 1),
    "data.test_days": (int, 3),
    "data.period_s": (int, 3),
    "data.appliances": (_strs, ("fridge", "microwave")),
    "data.train_tables": (_strs, ()),
    "data.val_tables": (_strs, ()),
    "data.test_tables": (_strs, ()),
    "data.pool": (str, ""),
    "data.norm_constant": (float, 612.0),
    "status.threshold_w": (float, 15.0),
    "window.input_len": (int, 192),
    "window.output_len": (int, 64),
    "window.train_stride": (int, 32),
    "model.preset": (str, "matnilm"),
    "model.encoder": (str, "conv"),
    "model.n_blocks": (int, 3),
    "model.d_model": (int, 32),
    "model.n_heads": (int, 4),
    "model.d_ff": (int, 64),
    "model.head_hidden": (int, 32),
    "model.conv_channels": (_ints, (16, 16, 32, 32)),
    "model.conv_kernels": (_ints, (9, 7, 5, 5)),
    "model.rnn_hidden": (int, 32),
    "model.rnn_layers": (int, 5),
    "model.mt": (_bool, True),
    "model.ta": (_bool, True),
    "model.aa": (_bool, True),
    "model.tie_temporal": (_bool, False),
    "train.max_epochs": (int, 40),
    "train.patience": (int, 15),
    "train.learning_rate": (float, 1e-3),
    "train.batch_size": (int, 32),
    "train.seed": (int, 0),
    "sa.enabled": (_bool, None),
    "sa.sigma": (float, 0.1),
    "sa.prob": (float, 0.5),
    "sa.pmf": (_floats, (0.25, 0.25, 0.25, 0.25)),
    "sa.distractors": (_strs, ()),
    "pool.min_on_s": (int, 6),
    "pool.max_gap_s": (int, 0),
    "eval.sae_horizon": (int, DEFAULT_SAE_HORIZON),
    "output.dir": (str, "runs/default"),
}

# per-appliance keys: <prefix>.<appliance>
_TOP = "top"  # section holding keys written before any header
PER_APPLIANCE = {"status.threshold": float, "sa.prob": float, "sa.pmf": _floats}


@dataclass
class ExperimentConfig:
    values: Dict[str, Any] = field(default_factory=dict)
    per_appliance: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def __getitem__(self, key):
        if key in self.values:
            return self.values[key]
        return SCHEMA[key][1]

    def with_overrides(self, **kv) -> "ExperimentConfig":
        """Copy with dotted keys given as ``section__key=value``."""
        vals = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key '{key}'", key)
            vals[key] = v
        return ExperimentConfig(vals, {k: dict(v) for k, v in self.per_appliance.items()})

    @property
    def appliances(self) -> List[str]:
        return list(self["data.appliances"])

    @property
    def sa_enabled(self) -> bool:
        explicit = self["sa.enabled"]
        return (self["scenario"] == "S3") if explicit is None else bool(explicit)


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI-style config text; keys before the first section are top-level."""
    ini = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",), strict=False,
                                    default_section="\0")
    ini.optionxform = str  # keep key case
    try:
        ini.read_string(f"[{_TOP}]\n" + textwrap.dedent(text))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values: Dict[str, Any] = {}
    per_app: Dict[str, Dict[str, Any]] = {}
    for section in ini.sections():
        for k, v in ini.items(section):
            key = k if section == _TOP else f"{section}.{k}"
            v = v.strip().strip('"').strip("'")
            if key in SCHEMA:
                parser = SCHEMA[key][0]
            else:
                prefix, _, app = key.rpartition(".")
                if prefix not in PER_APPLIANCE or not app:
                    raise ConfigError(f"unknown config key '{key}'", key)
                parser = PER_APPLIANCE[prefix]
            try:
                val = parser(v)
            except ValueError as exc:
                raise ConfigError(f"invalid value for '{key}': {exc}", key) from exc
            if key in SCHEMA:
                values[key] = val
            else:
                per_app.setdefault(prefix, {})[app] = val
    cfg = ExperimentConfig(values, per_app)
    validate(cfg)
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def validate(cfg: ExperimentConfig) -> None:
    if cfg["scenario"] not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}", "scenario")
    if cfg["data.source"] not in ("synthbench", "tables"):
        raise ConfigError("data.source must be synthbench or tables", "data.source")
    if cfg["model.preset"] not in ("matnilm", "sgn"):
        raise ConfigError("model.preset must be matnilm or sgn", "model.preset")
    if cfg["model.aa"] and not cfg["model.mt"] and cfg["model.preset"] == "matnilm":
        raise ConfigError("model.aa requires model.mt", "model.aa")
    apps = cfg.appliances
    if not apps:
        raise ConfigError("data.appliances is empty", "data.appliances")
    for prefix, entries in cfg.per_appliance.items():
        for app in entries:
            if app not in apps and app not in cfg["sa.distractors"]:
                raise ConfigError(f"unknown appliance in '{prefix}.{app}'", f"{prefix}.{app}")
    if cfg["data.source"] == "tables":
        for key in ("data.train_tables", "data.val_tables", "data.test_tables"):
            if not cfg[key]:
                raise ConfigError(f"{key} is required when data.source = tables", key)
    try:
        model_config(cfg)
        train_config(cfg)
        scaling_config(cfg)
        WindowSpec.from_lengths(cfg["window.input_len"], cfg["window.output_len"], cfg["window.train_stride"], apps)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    base = ModelConfig(
        n_appliances=len(cfg.appliances),
        input_len=cfg["window.input_len"],
        output_len=cfg["window.output_len"],
        encoder_variant=cfg["model.encoder"],
        n_blocks=cfg["model.n_blocks"],
        d_model=cfg["model.d_model"],
        n_heads=cfg["model.n_heads"],
        d_ff=cfg["model.d_ff"],
        head_hidden=cfg["model.head_hidden"],
        conv_channels=cfg["model.conv_channels"],
        conv_kernels=cfg["model.conv_kernels"],
        rnn_hidden=cfg["model.rnn_hidden"],
        rnn_layers=cfg["model.rnn_layers"],
        tie_temporal=cfg["model.tie_temporal"],
        appliance_attention=False,
    )
    if cfg["model.preset"] == "sgn":
        # one independent branch per appliance, no attention
        return configure_ablation(base, mt=False, ta=False, aa=False)
    return configure_ablation(base, mt=cfg["model.mt"], ta=cfg["model.ta"], aa=cfg["model.aa"])


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        max_epochs=cfg["train.max_epochs"],
        patience=cfg["train.patience"],
        learning_rate=cfg["train.learning_rate"],
        batch_size=cfg["train.batch_size"],
        sa_enabled=cfg.sa_enabled,
        seed=cfg["train.seed"],
    )


def scaling_config(cfg: ExperimentConfig) -> ScalingConfig:
    return ScalingConfig(
        sigma=cfg["sa.sigma"],
        mode_pmf={k: list(v) for k, v in cfg.per_appliance.get("sa.pmf", {}).items()},
        aug_prob=dict(cfg.per_appliance.get("sa.prob", {})),
        default_pmf=list(cfg["sa.pmf"]),
        default_prob=cfg["sa.prob"],
    )


def status_rule(cfg: ExperimentConfig) -> StatusRule:
    return StatusRule(dict(cfg.per_appliance.get("status.threshold", {})), cfg["status.threshold_w"])


def resolve_path(path: str) -> str:
    """Relative data paths are taken from ``$MATNILM_DATA_ROOT`` when set."""
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


# ---------------------------------------------------------------- data


@dataclass
class ExperimentData:
    train: List[AlignedTable]
    val: List[AlignedTable]
    test: List[AlignedTable]
    pool_tables: List[AlignedTable]


def _as_normalized(table: AlignedTable, c: float) -> AlignedTable:
    if table.norm_constant == 1.0:
        return normalize(table, c)
    if not np.isclose(table.norm_constant, c):
        raise ConfigError(f"table normalized by {table.norm_constant}, config says {c}", "data.norm_constant")
    return table


def load_data(cfg: ExperimentConfig) -> ExperimentData:
    c = cfg["data.norm_constant"]
    if cfg["data.source"] == "synthbench":
        days = cfg["data.s1_train_days"] if cfg["scenario"] == "S1" else 1
        b = default_benchmark(cfg["data.seed"], train_days=days, val_days=cfg["data.val_days"],
                              test_days=cfg["data.test_days"], period_s=cfg["data.period_s"])
        train, val, test = b.train, b.val, b.test
    else:
        def read(key):
            try:
                return [read_table(resolve_path(p)) for p in cfg[key]]
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read {key}: {exc}", key) from exc
        train, val, test = read("data.train_tables"), read("data.val_tables"), read("data.test_tables")
    for t in train + val + test:
        missing = [a for a in cfg.appliances if a not in t.appliances]
        if missing:
            raise ConfigError(f"table {t.source or ''} lacks appliances {missing}", "data.appliances")
    norm = lambda ts: [_as_normalized(t, c) for t in ts]
    train, val, test = norm(train), norm(val), norm(test)
    return ExperimentData(train, val, test, pool_tables=train)


def windows(tables: Sequence[AlignedTable], spec: WindowSpec, rule: StatusRule) -> WindowDataset:
    parts = [build_windows(t, spec, rule) for t in tables if len(t) >= spec.T]
    if not parts:
        raise ConfigError(f"no table is long enough for input_len={spec.T}", "window.input_len")
    return WindowDataset.concat(parts)


def make_pool(cfg: ExperimentConfig, data: ExperimentData, rule: StatusRule) -> AppliancePool:
    if cfg["data.pool"]:
        try:
            return load_pool(resolve_path(cfg["data.pool"]))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load pool: {exc}", "data.pool") from exc
    ids = cfg.appliances + [d for d in cfg["sa.distractors"] if d not in cfg.appliances]
    thresholds = {a: rule.threshold_w(a) for a in ids}
    return build_pool(data.pool_tables, ids, thresholds, min_on_s=cfg["pool.min_on_s"],
                      max_gap_s=cfg["pool.max_gap_s"])


# ---------------------------------------------------------------- evaluation


def flatten_predictions(data: WindowDataset, arrays):
    """``(B, n, L)`` window outputs -> ``(n, B*L)`` rows in time order."""
    n = arrays.shape[1]
    return arrays.transpose(1, 0, 2).reshape(n, -1)


def evaluate_model(model, data: WindowDataset, appliances, M: int, name: str = "model", baseline=None) -> EvalReport:
    _, on_prob, y_hat = predict(model, data)
    c = data.norm_constant
    y = flatten_predictions(data, data.y) * c
    rep = score(y, flatten_predictions(data, y_hat) * c, flatten_predictions(data, data.y_c),
                flatten_predictions(data, on_prob), appliances, M=M, name=name)
    rep.baseline = baseline
    return rep


def zero_baseline(data: WindowDataset, appliances, M: int) -> EvalReport:
    """Predict-always-off reference: zero power, zero on-probability."""
    y = flatten_predictions(data, data.y) * data.norm_constant
    return score(y, np.zeros_like(y), flatten_predictions(data, data.y_c), np.zeros_like(y), appliances,
                 M=M, name="zero")


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    report: EvalReport
    zero: EvalReport
    train: TrainResult
    test_set: WindowDataset
    pool_counts: Dict[str, int]
    checkpoint_path: Optional[str] = None
    history_path: Optional[str] = None


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None,
                   baseline: Optional[EvalReport] = None) -> ExperimentResult:
    """Train and evaluate one configuration.

    With ``out_dir`` (or ``output.dir`` when ``out_dir`` is ``""``) the
    checkpoint, history CSV and report CSV are written there.
    """
    validate(cfg)
    apps = cfg.appliances
    rule = status_rule(cfg)
    data = load_data(cfg)
    T, out = cfg["window.input_len"], cfg["window.output_len"]
    train_spec = WindowSpec.from_lengths(T, out, cfg["window.train_stride"], apps)
    eval_spec = WindowSpec.from_lengths(T, out, None, apps)  # non-overlapping outputs
    train_set = windows(data.train, train_spec, rule)
    val_set = windows(data.val, eval_spec, rule)
    test_set = windows(data.test, eval_spec, rule)

    tcfg = train_config(cfg)
    aug, counts = None, {}
    if tcfg.sa_enabled:
        pool = make_pool(cfg, data, rule)
        counts = pool.counts()
        if not len(pool):
            raise ConfigError("augmentation enabled but no operation profiles were found", "data.pool")
        aug = Augmentation(pool, scaling_config(cfg), rule, apps, tuple(cfg["sa.distractors"]))

    mcfg = model_config(cfg)
    model = build_model(mcfg, tcfg.seed)
    result = train(model, train_set, val_set, tcfg, aug, apps)

    M = cfg["eval.sae_horizon"]
    zero = zero_baseline(test_set, apps, M)
    report = evaluate_model(result.model, test_set, apps, M, name=cfg["name"], baseline=baseline)

    res = ExperimentResult(cfg, report, zero, result, test_set, counts)
    if out_dir is not None:
        d = out_dir or cfg["output.dir"]
        os.makedirs(d, exist_ok=True)
        res.checkpoint_path = os.path.join(d, "model.ckpt")
        res.history_path = os.path.join(d, "history.csv")
        meta = {
            "appliances": apps,
            "thresholds_w": {a: rule.threshold_w(a) for a in apps},
            "scenario": cfg["scenario"],
            "sa_enabled": tcfg.sa_enabled,
            "sae_horizon": M,
            "seed": tcfg.seed,
        }
        save_checkpoint(res.checkpoint_path, result.model, train_set.norm_constant, meta,
                        train_state=asdict(result.state), best_state=result.best_state,
                        optimizer=result.optimizer, last_state=result.final_state)
        write_history(result.history, res.history_path)
        report.to_csv(os.path.join(d, "report.csv"))
    return res
