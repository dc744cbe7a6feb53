import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matnilm.metrics import EvalReport, f1, improvement, mae, sae, score

from oracles import f1_loop, mae_loop, sae_loop


def test_random_cases_match_loop_oracles():
    rng = np.random.default_rng(0)
    for case in range(10_000):
        H = int(rng.integers(1, 40))
        y = rng.uniform(0, 2000, H) * (rng.random(H) < 0.6)
        y_hat = np.abs(y + rng.normal(0, 100, H))
        M = int(rng.integers(1, H + 1))
        o = rng.random(H) < 0.3
        o_hat = rng.random(H) < 0.3
        assert abs(mae(y, y_hat) - mae_loop(y, y_hat)) <= 1e-9
        assert abs(sae(y, y_hat, M) - sae_loop(y, y_hat, M)) <= 1e-9
        assert abs(f1(o, o_hat) - f1_loop(o, o_hat)) <= 1e-9


class TestClosedForms:
    def test_mae(self):
        assert mae([1, 2, 3], [1, 2, 4]) == pytest.approx(1 / 3)
        assert mae([5.0, 6.0], [5.0, 6.0]) == 0

    def test_sae_compensating(self):
        assert sae([1, 1, 2, 2], [2, 0, 1, 3], M=2) == 0

    def test_sae_drops_remainder(self):
        # third sample sits in the dropped partial sub-horizon
        assert sae([1, 1, 100], [0, 0, 0], M=2) == pytest.approx(1.0)

    def test_sae_default_horizon_on_a_day(self):
        rng = np.random.default_rng(1)
        y, y_hat = rng.uniform(0, 100, 28800), rng.uniform(0, 100, 28800)
        assert sae(y, y_hat) == pytest.approx(sae_loop(y, y_hat, 1200), abs=1e-9)

    def test_f1(self):
        o = [1, 1, 1, 0, 0]
        o_hat = [1, 1, 0, 1, 0]  # TP 2, FP 1, FN 1
        assert f1(o, o_hat) == pytest.approx(2 / 3)
        assert f1(o, o) == 1.0
        assert f1([0, 0, 0], [0, 0, 0]) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            mae([1, 2], [1])
        with pytest.raises(ValueError):
            sae([1, 2], [1, 2], M=3)
        with pytest.raises(ValueError):
            f1([1, 0], [1])
        with pytest.raises(ValueError):
            improvement(0.0, 1.0)


class TestImprovement:
    def test_reported_average(self):
        imp = improvement(30.17, 14.41)
        assert imp == pytest.approx(52.24, abs=0.005)
        assert abs(imp - 52.23) <= 0.1

    def test_bounds(self):
        assert improvement(10.0, 10.0) == 0
        assert improvement(10.0, 0.0) == 100


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 5000), min_size=1, max_size=60), st.integers(0, 2**31), st.integers(1, 60))
def test_sae_bounded_by_mae(vals, seed, M):
    y = np.asarray(vals)
    y_hat = np.abs(y + np.random.default_rng(seed).normal(0, 500, y.size))
    M = min(M, y.size)
    S = y.size // M
    # the bound holds on the scored part of the horizon
    assert sae(y, y_hat, M) <= mae(y[: S * M], y_hat[: S * M]) + 1e-9
    assert sae(y, y_hat, M) >= 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=50), st.integers(0, 2**31))
def test_f1_order_invariant(pairs, seed):
    o, o_hat = map(np.array, zip(*pairs))
    perm = np.random.default_rng(seed).permutation(len(pairs))
    assert f1(o, o_hat) == f1(o[perm], o_hat[perm])


class TestReport:
    def _report(self, name, m, baseline=None):
        return EvalReport(["a", "b"], {"a": m, "b": 2 * m}, {"a": m / 2, "b": m}, {"a": 0.5, "b": 0.7}, name, baseline)

    def test_average_and_improvement(self):
        base = self._report("base", 10.0)
        new = self._report("new", 5.0, base)
        new.f1 = {"a": 0.6, "b": 0.9}
        assert new.average("mae") == new.average("MAE") == 7.5
        assert new.improvement("mae") == pytest.approx(50.0)
        # F1 is higher-is-better: a gain is a positive improvement
        assert new.improvement("f1") == pytest.approx((0.75 - 0.6) / 0.6 * 100)
        assert new.improvement("F1") == new.improvement("f1")
        assert base.improvement("mae") is None

    def test_csv_layout(self, tmp_path):
        rep = self._report("m", 4.0, self._report("b", 8.0))
        p = tmp_path / "r.csv"
        rep.to_csv(str(p))
        lines = p.read_text().splitlines()
        assert lines[0] == "metric,model,a,b,Ave,Imp"
        assert lines[1] == "MAE,m,4.000000,8.000000,6.000000,50.000000"
        assert "Ave" in rep.format_table()

    def test_score_binarizes_probabilities(self):
        y = np.array([[0, 50, 50, 0]], float)
        rep = score(y, y, y > 15, np.array([[0.2, 0.9, 0.51, 0.5]]), ["a"], M=2)
        assert rep.mae["a"] == 0 and rep.sae["a"] == 0 and rep.f1["a"] == 1.0
