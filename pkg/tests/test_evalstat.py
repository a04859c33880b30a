import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from naive import naive_lrv

from normtta import evalstat as E

finite = st.floats(-1e3, 1e3, allow_nan=False)


# ---------------------------------------------------------------------------
# point metrics


def test_regression_examples():
    y = np.array([0.3, -1.0, 2.0, 4.0])
    assert E.regression_metrics(y, y) == {"MAE": 0.0, "RMSE": 0.0, "R2": 1.0, "r2_defined": True}
    assert E.regression_metrics(np.full(4, y.mean()), y)["R2"] == pytest.approx(0.0, abs=1e-15)
    m = E.regression_metrics([0, 0, 0], [0, 1, 2])
    assert m["MAE"] == 1.0
    assert m["RMSE"] == pytest.approx(math.sqrt(5 / 3))
    assert m["R2"] == pytest.approx(-1.5)


def test_regression_constant_target_flagged():
    m = E.regression_metrics([1, 2], [3, 3])
    assert math.isnan(m["R2"]) and not m["r2_defined"]
    with pytest.raises(ValueError):
        E.regression_metrics([1], [1, 2])


def test_classification_perfect():
    y = np.array([0, 1, 1, 0, 1])
    m = E.classification_metrics(y.astype(float), y)
    assert (m["accuracy"], m["F1"], m["AUC"], m["ECE"]) == (1.0, 1.0, 1.0, 0.0)


def test_classification_coin_flip():
    y = np.array([1, 1, 1, 0, 0, 1, 0, 1])
    m = E.classification_metrics(np.full(8, 0.5), y)
    base = y.mean()
    assert m["accuracy"] == base
    assert m["ECE"] == pytest.approx(abs(base - 0.5))


def test_classification_accepts_two_column_probs():
    p = np.array([[0.2, 0.8], [0.7, 0.3]])
    assert E.classification_metrics(p, [1, 0])["accuracy"] == 1.0
    with pytest.raises(ValueError):
        E.classification_metrics(np.array([[0.2, 0.9]]), [1])


def test_random_auc_near_half():
    rng = np.random.default_rng(0)
    auc = E.auc_score(rng.random(10_000), rng.integers(0, 2, 10_000))
    assert abs(auc - 0.5) <= 0.02


def test_single_class_auc_flagged():
    m = E.classification_metrics([0.2, 0.9, 0.6], [1, 1, 1])
    assert math.isnan(m["AUC"]) and not m["auc_defined"]


def test_auc_matches_pair_count():
    rng = np.random.default_rng(1)
    s = rng.integers(0, 5, 60).astype(float)  # ties on purpose
    y = rng.integers(0, 2, 60)
    pos, neg = s[y == 1], s[y == 0]
    pairs = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg) / (len(pos) * len(neg))
    assert E.auc_score(s, y) == pytest.approx(pairs)


@given(arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 1)), st.data())
def test_ece_bounds(p, data):
    y = data.draw(arrays(np.int64, p.shape, elements=st.integers(0, 1)))
    ece = E.expected_calibration_error(p, y)
    assert 0.0 <= ece <= 1.0


def test_reliability_table_shape():
    rows = E.reliability_table([0.95, 0.05, 0.55], [1, 0, 0])
    assert len(rows) == 10 and sum(r["count"] for r in rows) == 3
    assert rows[9]["count"] == 2 and rows[9]["accuracy"] == 1.0
    assert rows[5]["count"] == 1 and rows[5]["accuracy"] == 0.0


# ---------------------------------------------------------------------------
# HAC inference


def test_lag_rule():
    assert E.newey_west_lag(100) == 4
    assert E.newey_west_lag(500) == math.floor(4 * 5 ** (2 / 9))


@given(arrays(np.float64, st.integers(2, 60), elements=finite), st.integers(0, 12))
def test_lrv_matches_loop_oracle_and_is_nonnegative(x, q):
    v = E.long_run_variance(x, q)
    assert v >= -1e-9 * max(1.0, float(np.abs(x).max()) ** 2)
    if q < len(x):
        assert v == pytest.approx(naive_lrv(list(x), q), rel=1e-9, abs=1e-9)


def test_dm_degenerate():
    a = np.random.default_rng(0).random(50)
    with pytest.raises(E.DegenerateTestError):
        E.dm_test(a, a)
    with pytest.raises(E.DegenerateTestError):
        E.dm_test(a + 1.0, a)


def test_dm_errors():
    with pytest.raises(ValueError):
        E.dm_test(np.ones(20), np.ones(21))
    with pytest.raises(ValueError):
        E.dm_test(np.ones(5), np.zeros(5))


def test_dm_mean_statistic_monte_carlo():
    rng = np.random.default_rng(0)
    stats = [E.dm_test(rng.normal(0.5, 1, 400), np.zeros(400)).statistic for _ in range(200)]
    assert 8 <= np.mean(stats) <= 12


@given(arrays(np.float64, 30, elements=finite), arrays(np.float64, 30, elements=finite))
def test_dm_antisymmetry(a, b):
    try:
        ab = E.dm_test(a, b)
    except E.DegenerateTestError:
        return
    ba = E.dm_test(b, a)
    assert ab.statistic == -ba.statistic
    assert ab.p_value == ba.p_value


def test_dm_location_invariance():
    rng = np.random.default_rng(3)
    a, b = rng.random(200), rng.random(200)
    base = E.dm_test(a, b).statistic
    assert E.dm_test(a + 7.25, b + 7.25).statistic == pytest.approx(base, rel=1e-9)


def test_dm_sign_convention():
    rng = np.random.default_rng(4)
    b = rng.random(300) + 0.5
    a = b - rng.random(300) * 0.2 - 0.01  # A strictly better
    r = E.dm_test(a, b)
    assert r.statistic < 0 and r.mean_diff < 0 and 0 <= r.p_value <= 1
    assert "negative" in r.convention


def test_nw_zero_lag_is_classical():
    x = np.random.default_rng(0).normal(size=300)
    r = E.nw_mean_test(x, lag=0)
    assert r.variance == pytest.approx(x.var() / 300)


def test_nw_size():
    rng = np.random.default_rng(0)
    ok = sum(abs(E.nw_mean_test(rng.normal(size=10_000)).t_stat) < 3 for _ in range(500))
    assert ok / 500 >= 0.99


def test_nw_ar1_long_run_variance():
    rng = np.random.default_rng(0)
    T, phi = 100_000, 0.5
    e = rng.normal(size=T)
    x = np.empty(T)
    x[0] = e[0]
    for t in range(1, T):
        x[t] = phi * x[t - 1] + e[t]
    ratio = E.nw_mean_test(x, lag=20).variance / (x.var() / T)
    assert ratio == pytest.approx((1 + phi) / (1 - phi), rel=0.2)


def test_nw_degenerate():
    with pytest.raises(E.DegenerateTestError):
        E.nw_mean_test(np.full(20, 0.01))


# ---------------------------------------------------------------------------
# backtest


def test_backtest_alternating_zero_sharpe():
    r = np.tile([0.01, -0.01], 50)
    rep = E.backtest(np.ones(100), r)
    assert rep.annual_return == 0.0 and rep.sharpe == 0.0


def test_backtest_always_long_closed_form():
    rng = np.random.default_rng(0)
    r = rng.normal(size=500)
    r = 0.0004 + 0.01 * (r - r.mean()) / r.std(ddof=1)  # mean and std exact
    rep = E.backtest(np.full(500, 0.9), r, trading_days_per_year=252)
    assert rep.sharpe == pytest.approx(0.0004 / 0.01 * math.sqrt(252), rel=1e-10)
    assert rep.annual_return == pytest.approx(0.0004 * 252)
    assert rep.annual_volatility == pytest.approx(0.01 * math.sqrt(252))


def test_backtest_short_positions_and_undefined_sharpe():
    rep = E.backtest([0.2, 0.8, 0.1], [0.01, 0.02, -0.03])
    np.testing.assert_allclose(rep.strategy_returns, [-0.01, 0.02, 0.03])
    flat = E.backtest(np.ones(20), np.full(20, 0.001))
    assert not flat.sharpe_defined and math.isnan(flat.sharpe) and flat.annual_volatility == 0.0


@given(arrays(np.float64, st.integers(12, 80), elements=st.floats(-0.1, 0.1)), st.data())
def test_sharpe_sign_matches_mean(r, data):
    p = data.draw(arrays(np.float64, r.shape, elements=st.floats(0, 1)))
    rep = E.backtest(p, r)
    if rep.sharpe_defined and rep.strategy_returns.mean() != 0:
        assert np.sign(rep.sharpe) == np.sign(rep.strategy_returns.mean())


# ---------------------------------------------------------------------------
# rolling curves and ranks


def test_rolling_examples():
    rows = E.rolling_metrics(np.ones(30), 5)
    assert all(r["value"] == 1.0 for r in rows) and len(rows) == 26
    v = np.random.default_rng(0).random(40)
    (only,) = E.rolling_metrics(v, 40)
    assert only["value"] == pytest.approx(v.mean())
    with pytest.raises(ValueError):
        E.rolling_metrics(v, 41)


def test_rolling_step_transition_length():
    t0, w = 50, 7
    v = np.r_[np.zeros(t0), np.ones(50)]
    curve = np.array([r["value"] for r in E.rolling_metrics(v, w)])
    days = np.array([r["day"] for r in E.rolling_metrics(v, w)])
    moving = days[(curve > 0) & (curve < 1)]
    assert moving.min() == t0 and moving.max() == t0 + w - 2
    assert curve[days == t0 + w - 1][0] == 1.0  # fully switched after exactly w days


def test_rolling_regime_column():
    rows = E.rolling_metrics([1, 0, 1, 0], 2, regimes=["a", "a", "b", "b"])
    assert [r["regime"] for r in rows] == ["a", "b", "b"]


def test_average_ranks_with_ties():
    ranks = E.average_ranks({"A": [0.6, 0.5], "B": [0.6, 0.4], "C": [0.4, 0.5]})
    assert ranks == {"A": 1.5, "B": 2.25, "C": 2.25}
