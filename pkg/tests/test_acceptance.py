"""Acceptance suite: one test per criterion, summarized as pass/fail lines.

Run on its own with ``python3 -m pytest tests/test_acceptance.py -v``. The
experiment criteria (6, 7, 9) train the desk-scale model several times and
take about half an hour on one CPU core; their runs are shared through a
module-scoped cache.
"""

import copy
import math
import os
import time
import warnings

import numpy as np
import pytest
import torch

from matnilm.augment import augment_batch
from matnilm.experiment import load_data, make_pool, parse_config, run_experiment, status_rule, windows
from matnilm.metrics import f1, improvement, mae, sae
from matnilm.model import ModelConfig, multi_head_attention
from matnilm.pool import ScalingConfig
from matnilm.series_store import PreprocessConfig, merge_channels, read_merged_csv, segment_table
from matnilm.trainer import EarlyStopping, TrainConfig, read_history, train
from matnilm.windows import WindowSpec, derive_status

from gradcheck import gradient_check
from oracles import dense_attention, f1_loop, mae_loop, sae_loop
from test_trainer import SCRIPTS, _stopping_oracle, _dataset, _model

DATA = os.path.join(os.path.dirname(__file__), "data")
SEEDS = (0, 1, 2)
SOFT_SEEDS = (0,)  # attention ablation rows are informational; one seed keeps the suite affordable


def _config(sa=True, seed=0, ta=True, aa=True):
    return parse_config(f"scenario = S3\n[sa]\nenabled = {sa}\n[train]\nseed = {seed}\n"
                        f"[model]\nta = {ta}\naa = {aa}\n")


class _Runs:
    """Caches desk-scale experiment results keyed by (sa, seed, ta, aa)."""

    def __init__(self, root):
        self.root = root
        self.results, self.seconds = {}, {}

    def get(self, sa=True, seed=0, ta=True, aa=True):
        key = (sa, seed, ta, aa)
        if key not in self.results:
            out = os.path.join(self.root, "sa{}_seed{}_ta{}_aa{}".format(*(int(k) for k in key)))
            t = time.perf_counter()
            self.results[key] = run_experiment(_config(*key), out_dir=out)
            self.seconds[key] = time.perf_counter() - t
        return self.results[key]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return _Runs(str(tmp_path_factory.mktemp("acceptance")))


@pytest.mark.criterion(1, "attention matches dense oracle to 1e-6, rows sum to 1")
def test_c1_attention_oracle(record_property):
    rng = np.random.default_rng(0)
    worst = row_err = 0.0
    t = time.perf_counter()
    for case in range(60):
        L, Lk = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        h = int(rng.choice([1, 2, 4]))
        d = h * int(rng.integers(1, 8 // h + 1))
        q, k, v = rng.normal(size=(L, d)), rng.normal(size=(Lk, d)), rng.normal(size=(Lk, d))
        ws = [rng.normal(size=(d, d)) / math.sqrt(d) for _ in range(4)]
        out, w = multi_head_attention(*(torch.tensor(a) for a in (q, k, v, *ws)), n_heads=h, return_weights=True)
        ref_out, ref_w = dense_attention(q, k, v, *ws, n_heads=h)
        worst = max(worst, np.abs(out.numpy() - ref_out).max(), np.abs(w.numpy() - ref_w).max())
        row_err = max(row_err, np.abs(w.numpy().sum(-1) - 1).max())
    elapsed = time.perf_counter() - t
    record_property("detail", f"max err {worst:.1e}, row-sum err {row_err:.1e}, {elapsed:.2f} s")
    assert worst <= 1e-6 and row_err <= 1e-6
    assert elapsed < 1.0


@pytest.mark.criterion(2, "gradient check T=32, d_model=8, n=2, m=1: rel err <= 1e-4 per group")
def test_c2_gradient_check(record_property):
    cfg = ModelConfig(n_appliances=2, input_len=32, output_len=16, d_model=8, n_heads=2, d_ff=16,
                      head_hidden=8, conv_channels=(4, 4), conv_kernels=(5, 3), n_blocks=1)
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        t = time.perf_counter()
        errs = gradient_check(cfg, seed=0, step=1e-4)
        elapsed = time.perf_counter() - t
    finally:
        torch.set_default_dtype(old)
    name = max(errs, key=errs.get)
    record_property("detail", f"{len(errs)} groups, worst {errs[name]:.1e} ({name}), {elapsed:.1f} s")
    assert all(e <= 1e-4 for e in errs.values()), {k: v for k, v in errs.items() if v > 1e-4}
    assert elapsed < 120


@pytest.mark.criterion(3, "augmentation: aggregate identity 1e-6, y_c = derive_status(y), prob=0 no-op")
def test_c3_augmentation_consistency(record_property):
    cfg = parse_config("")
    rule = status_rule(cfg)
    data = load_data(cfg)
    apps = cfg.appliances
    spec = WindowSpec.from_lengths(cfg["window.input_len"], cfg["window.output_len"],
                                   cfg["window.train_stride"], apps)
    train_set = windows(data.train, spec, rule)
    pool = make_pool(cfg, data, rule)
    c = train_set.norm_constant
    thresholds = [rule.threshold(a, c) for a in apps]
    scaling = ScalingConfig(sigma=0.1, default_prob=0.5)
    pick = np.random.default_rng(0)
    worst, changed = 0.0, 0
    t = time.perf_counter()
    for call in range(1000):
        batch = train_set.samples(pick.choice(len(train_set), 8, replace=False))
        out = augment_batch(batch, pool, scaling, rule, np.random.default_rng(call), targets=apps, norm_constant=c)
        for s, o in zip(batch, out):
            # x' - x equals the change in the summed labels over the whole span
            resid = (o.x - s.x) - (o.y_span - s.y_span).sum(0)
            worst = max(worst, np.abs(resid).max())
            for k in range(len(apps)):
                assert np.array_equal(o.y_c[k], derive_status(o.y[k], thresholds[k]))
            changed += o is not s
    noop = ScalingConfig(default_prob=0.0)
    for call in range(100):
        batch = train_set.samples(pick.choice(len(train_set), 8, replace=False))
        out = augment_batch(batch, pool, noop, rule, np.random.default_rng(call), targets=apps, norm_constant=c)
        for s, o in zip(batch, out):
            assert o.x.tobytes() == s.x.tobytes() and o.y_span.tobytes() == s.y_span.tobytes()
            assert o.y_c.tobytes() == s.y_c.tobytes()
    elapsed = time.perf_counter() - t
    record_property("detail", f"identity err {worst:.1e}, {changed}/8000 samples changed, {elapsed:.1f} s")
    assert worst <= 1e-6 and changed > 0
    assert elapsed < 60


@pytest.mark.criterion(4, "metrics match loop oracles on 1e4 cases to 1e-9; Imp(30.17, 14.41) ~ 52.23%")
def test_c4_metric_oracles(record_property):
    rng = np.random.default_rng(1)
    worst = 0.0
    for case in range(10_000):
        H = int(rng.integers(1, 40))
        y = rng.uniform(0, 2000, H) * (rng.random(H) < 0.6)
        y_hat = np.abs(y + rng.normal(0, 100, H))
        M = int(rng.integers(1, H + 1))
        o, o_hat = rng.random(H) < 0.3, rng.random(H) < 0.3
        worst = max(worst, abs(mae(y, y_hat) - mae_loop(y, y_hat)), abs(sae(y, y_hat, M) - sae_loop(y, y_hat, M)),
                    abs(f1(o, o_hat) - f1_loop(o, o_hat)))
    imp = improvement(30.17, 14.41)
    record_property("detail", f"max err {worst:.1e}, Imp = {imp:.2f}%")
    assert worst <= 1e-9
    assert abs(imp - 52.23) <= 0.1


@pytest.mark.criterion(5, "early stopping: scripted sequences give the dictated stop epoch and best weights")
def test_c5_early_stopping(record_property):
    t = time.perf_counter()
    data = _dataset(16)
    for losses, patience in SCRIPTS:
        stop, best = _stopping_oracle(losses, patience)
        stopper = EarlyStopping(patience)
        for e, v in enumerate(losses, 1):
            stopper.update(e, v)
            if stopper.state.stopped:
                break
        assert (stopper.state.epoch, stopper.state.best_epoch) == (stop, best)
        snapshots = {}

        def scripted(model, epoch):
            snapshots[epoch] = copy.deepcopy(model.state_dict())
            return losses[epoch - 1]

        res = train(_model(), data, data, TrainConfig(max_epochs=len(losses), patience=patience, batch_size=16),
                    val_loss_fn=scripted)
        assert len(res.history) == stop and res.state.best_epoch == best
        for k, v in res.model.state_dict().items():
            assert torch.equal(v, snapshots[best][k])
    elapsed = time.perf_counter() - t
    record_property("detail", f"{len(SCRIPTS)} sequences, {elapsed:.1f} s")
    assert len(SCRIPTS) >= 10 and elapsed < 10


@pytest.mark.criterion(6, "desk S3, full model: F1 >= 0.90 per appliance, MAE <= 50% of zero baseline (3 seeds)")
def test_c6_desk_s3(runs, record_property):
    results = [runs.get(sa=True, seed=s) for s in SEEDS]
    seconds = sum(runs.seconds[(True, s, True, True)] for s in SEEDS)
    apps = results[0].config.appliances
    f1s = {a: np.mean([r.report.f1[a] for r in results]) for a in apps}
    maes = {a: np.mean([r.report.mae[a] for r in results]) for a in apps}
    zero = {a: np.mean([r.zero.mae[a] for r in results]) for a in apps}
    record_property("detail", ", ".join(f"{a} F1 {f1s[a]:.3f} MAE {maes[a]:.2f}/{zero[a]:.2f} W" for a in apps)
                    + f", {seconds:.0f} s")
    for a in apps:
        assert f1s[a] >= 0.90, (a, f1s[a])
        assert maes[a] <= 0.5 * zero[a], (a, maes[a], zero[a])
    assert seconds < 15 * 60


@pytest.mark.criterion(7, "SA on strictly improves average MAE over SA off (3 seeds); TA/AA rows soft")
def test_c7_ablation_direction(runs, record_property):
    def avg(results):
        return float(np.mean([r.report.average("MAE") for r in results]))

    on = avg([runs.get(sa=True, seed=s) for s in SEEDS])
    off = avg([runs.get(sa=False, seed=s) for s in SEEDS])
    full_soft = avg([runs.get(sa=True, seed=s) for s in SOFT_SEEDS])
    rows = {"TA off": avg([runs.get(sa=True, seed=s, ta=False) for s in SOFT_SEEDS]),
            "AA off": avg([runs.get(sa=True, seed=s, aa=False) for s in SOFT_SEEDS])}
    soft = []
    for name, value in rows.items():
        ok = full_soft <= 1.1 * value  # removing attention should not help by more than 10%
        soft.append(f"{name} {value:.2f} W ({'ok' if ok else 'soft miss'})")
        if not ok:
            warnings.warn(f"{name} average MAE {value:.2f} W beats the full model ({full_soft:.2f} W) by > 10%")
    record_property("detail", f"MAE SA on {on:.2f} W vs off {off:.2f} W; full (seed 0) {full_soft:.2f} W, "
                    + ", ".join(soft))
    assert on < off


@pytest.mark.criterion(8, "preprocessing golden fixture: gap, stuck run, short fragment")
def test_c8_preprocessing_golden(record_property):
    import json

    with open(os.path.join(DATA, "preprocess_expected.json")) as fh:
        expected = json.load(fh)
    table = merge_channels(read_merged_csv(os.path.join(DATA, "preprocess_fixture.csv")), expected["period_s"])
    segs = segment_table(table, PreprocessConfig())
    got = [{"start_ts": int(s.start_ts), "rows": len(s)} for s in segs]
    record_property("detail", f"{len(got)} segments " + ", ".join(f"{g['start_ts']}+{g['rows']}" for g in got))
    assert got == expected["segments"]
    b = expected["backfill"]
    np.testing.assert_array_equal(segs[b["segment"]].aggregate[b["rows"]], b["value"])
    assert all(np.isfinite(s.aggregate).all() for s in segs)


@pytest.mark.criterion(9, "two same-seed runs of the desk S3 experiment give identical history CSVs (1e-6)")
def test_c9_reproducible_history(runs, tmp_path, record_property):
    first = runs.get(sa=True, seed=0)
    again = run_experiment(_config(sa=True, seed=0), out_dir=str(tmp_path))
    a, b = read_history(first.history_path), read_history(again.history_path)
    assert len(a) == len(b) and list(a[0]) == list(b[0])
    worst = max(abs(ra[k] - rb[k]) for ra, rb in zip(a, b) for k in ra)
    record_property("detail", f"{len(a)} epochs, max field difference {worst:.1e}")
    assert worst <= 1e-6
