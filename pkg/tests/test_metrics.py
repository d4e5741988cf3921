import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from covadapt import metrics as M
from covadapt.metrics import DEFAULT_LEVELS


def test_quantile_loss_cases():
    assert M.quantile_loss(2.0, 2.0, 0.3) == 0.0
    assert M.quantile_loss(0.0, 2.0, 0.5) == 1.0
    assert M.quantile_loss(3.0, 1.0, 0.9) == pytest.approx(0.2)
    for a in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            M.quantile_loss(0.0, 1.0, a)


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.01, 0.99))
def test_quantile_loss_nonnegative(q, x, a):
    v = M.quantile_loss(q, x, a)
    assert v >= 0 and (v == 0) == (q == x)


def test_wql_hand_and_perfect():
    assert M.wql([np.array([[0.0]])], [np.array([2.0])], [0.5]) == pytest.approx(1.0)
    act = np.array([1.0, -2.0, 3.0])
    q = np.tile(act, (9, 1))
    assert M.wql([q], [act]) == 0.0


def test_wql_zero_actuals():
    with pytest.raises(M.UndefinedMetricError):
        M.wql([np.zeros((9, 2))], [np.zeros(2)])


def test_wql_decomposes_over_levels():
    rng = np.random.default_rng(0)
    qs = [np.sort(rng.normal(size=(9, 4)), axis=0) for _ in range(3)]
    acts = [rng.normal(size=4) for _ in range(3)]
    per = M.wql_per_level(qs, acts)
    assert M.wql(qs, acts) == pytest.approx(per.mean(), rel=1e-14)
    for j, a in enumerate(DEFAULT_LEVELS):
        assert per[j] == pytest.approx(M.wql([q[j : j + 1] for q in qs], acts, [a]), rel=1e-14)


@pytest.mark.parametrize("c", [0.1, 3.0, 100.0])
def test_scale_invariance(c):
    rng = np.random.default_rng(1)
    qs = [np.sort(rng.normal(size=(9, 5)), axis=0) for _ in range(2)]
    acts = [rng.normal(size=5) for _ in range(2)]
    assert M.wql([c * q for q in qs], [c * a for a in acts]) == pytest.approx(M.wql(qs, acts), rel=1e-12)
    ctx, pred, act = rng.normal(size=20), rng.normal(size=5), rng.normal(size=5)
    assert M.mase(c * pred, c * act, c * ctx, 7) == pytest.approx(M.mase(pred, act, ctx, 7), rel=1e-12)


def test_mase_hand_case():
    assert M.mase([7, 7], [7, 8], [1, 2, 3, 4, 5, 6], 1) == pytest.approx(0.5, abs=1e-15)
    assert M.mase([7, 8], [7, 8], [1, 2, 3, 4, 5, 6], 1) == 0.0


def test_mase_undefined():
    with pytest.raises(M.UndefinedMetricError):
        M.mase([1.0], [2.0], [1, 2, 1, 2], 2)
    with pytest.raises(ValueError):
        M.mase([1.0], [2.0], [1, 2], 3)


def test_seasonality():
    assert M.seasonality_for_frequency("1D") == 7
    assert M.seasonality_for_frequency("D") == 7
    assert M.seasonality_for_frequency("1H") == 24
    assert M.seasonality_for_frequency("15T") == 96
    assert M.seasonality_for_frequency("weird") == 1


def test_quantiles_from_samples():
    s = np.tile(np.arange(1.0, 101.0)[:, None], (1, 3))
    assert M.quantiles_from_samples(s, [0.5])[0] == pytest.approx([50.5] * 3)
    one = np.array([[1.0, 5.0, -2.0]])
    np.testing.assert_array_equal(M.quantiles_from_samples(one), np.tile(one, (9, 1)))
    q = M.quantiles_from_samples(np.random.default_rng(0).normal(size=(37, 6)))
    assert np.all(np.diff(q, axis=0) >= 0)


def test_agg_relative_score():
    b = np.array([0.3, 2.0, 1.5])
    assert M.agg_relative_score(b, b) == pytest.approx(1.0)
    assert M.agg_relative_score([0.5, 2.0], [1.0, 1.0]) == pytest.approx(1.0)
    assert M.agg_relative_score([0.25, 1.0], [1.0, 1.0]) == pytest.approx(0.5)
    with pytest.raises(M.AggregationError):
        M.agg_relative_score([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(M.AggregationError):
        M.agg_relative_score([1.0], [1.0, 2.0])


def test_average_rank():
    np.testing.assert_allclose(M.average_rank([[1.0, 2.0], [0.1, 0.5]]), [1.0, 2.0])
    np.testing.assert_allclose(M.average_rank([[1.0, 1.0], [0.1, 0.5]]), [1.25, 1.75])
    np.testing.assert_allclose(M.average_rank([[1.0, np.nan, 3.0], [2.0, 1.0, 3.0]]), [1.5, 1.0, 2.5])


def test_report_csv_round_trip(tmp_path):
    reps = [M.MetricReport("d1", "m1", 0.123456789012345, float("nan"), "IIB_OIB", 3, 7)]
    M.write_reports(tmp_path / "r.csv", reps, provenance={"seed": 7, "config_hash": "abc"})
    text = (tmp_path / "r.csv").read_text()
    assert text.startswith("# config_hash=abc seed=7\n")
    back = M.read_reports(tmp_path / "r.csv")[0]
    assert back.wql == reps[0].wql and math.isnan(back.mase) and back.variant == "IIB_OIB"


# ---------------------------------------------------------------- brute-force oracles


def random_instance(rng):
    n_series, H, n_lev = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
    levels = sorted(rng.uniform(0.01, 0.99, n_lev).tolist())
    qs = [rng.normal(size=(n_lev, H)) for _ in range(n_series)]
    acts = [rng.normal(size=H) for _ in range(n_series)]
    return qs, acts, levels


def test_metric_oracles_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(300):
        qs, acts, levels = random_instance(rng)
        ref = oracles.wql([q.tolist() for q in qs], [a.tolist() for a in acts], levels)
        assert abs(M.wql(qs, acts, levels) - ref) <= 1e-12 * max(1.0, abs(ref))
        S = int(rng.integers(1, 4))
        ctx = rng.normal(size=int(rng.integers(S + 1, 12)))
        pred, act = rng.normal(size=3), rng.normal(size=3)
        ref = oracles.mase(pred.tolist(), act.tolist(), ctx.tolist(), S)
        assert abs(M.mase(pred, act, ctx, S) - ref) <= 1e-12 * max(1.0, abs(ref))
