import json
import math

import numpy as np
import pytest
from scipy.stats import f_oneway

import oracles
from coherentcast.errors import ContractViolation
from coherentcast.metrics import (QL_LEVELS, UNDEFINED, WS_LEVELS, anova_oneway, evaluate_methods, interval_bounds,
                                  mae, mase, point_metrics, quantile_loss, rmse, winkler)


def test_perfect_forecast():
    a = np.arange(5.0)
    assert mae(a, a) == 0.0 and rmse(a, a) == 0.0
    for lvl in QL_LEVELS:
        assert quantile_loss(a, a, lvl) == 0.0


def test_mae_rmse_hand_values():
    assert mae([1, 2], [2, 4]) == 1.5
    assert rmse([1, 2], [2, 4]) == pytest.approx(math.sqrt(2.5), abs=1e-15)
    assert rmse([1, 2], [2, 4]) == pytest.approx(1.5811, abs=1e-4)


def test_mase_parity_with_naive():
    rng = np.random.default_rng(0)
    a = rng.normal(size=60)
    naive = np.r_[a[:24], a[:-24]]
    assert mase(a, naive, 24) == pytest.approx(1.0, abs=1e-15)


def test_mase_undefined_for_flat_series():
    assert mase(np.ones(30), np.zeros(30), 24) is UNDEFINED
    assert point_metrics(np.ones(30), np.zeros(30))["MASE(168)"] is UNDEFINED


def test_pinball_hand_values():
    assert quantile_loss([2.0], [1.0], 0.5) == 0.5
    assert quantile_loss([2.0], [1.0], 0.9) == 0.9
    assert quantile_loss([1.0], [2.0], 0.9) == pytest.approx(0.1)


def test_winkler_hand_values():
    assert winkler([2.0], [1.0], [3.0], 0.8) == 2.0
    assert winkler([0.0], [1.0], [3.0], 0.8) == pytest.approx(12.0, abs=1e-12)
    assert winkler([4.0], [1.0], [3.0], 0.8) == pytest.approx(12.0, abs=1e-12)


def test_bad_inputs():
    with pytest.raises(ContractViolation):
        mae([1, 2], [1])
    with pytest.raises(ContractViolation):
        quantile_loss([1], [1], 1.0)
    with pytest.raises(ContractViolation):
        winkler([1], [2], [1], 0.8)


@pytest.mark.parametrize("seed", range(100))
def test_point_and_quantile_metrics_match_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(30, 80))
    a, p = rng.normal(size=n) * 5, rng.normal(size=n) * 5
    lo, hi = np.sort(rng.normal(size=(2, n)) * 3, axis=0)
    lvl = float(rng.uniform(0.05, 0.95))
    assert mae(a, p) == pytest.approx(oracles.mae(a, p), abs=1e-10)
    assert rmse(a, p) == pytest.approx(oracles.rmse(a, p), abs=1e-10)
    assert mase(a, p, 24) == pytest.approx(oracles.mase(a.tolist(), p.tolist(), 24), abs=1e-10)
    assert quantile_loss(a, p, lvl) == pytest.approx(oracles.pinball(a, p, lvl), abs=1e-10)
    assert winkler(a, lo, hi, lvl) == pytest.approx(oracles.winkler(a, lo, hi, lvl), abs=1e-10)


def test_anova_hand_value():
    res = anova_oneway([[1, 2, 3], [4, 5, 6]])
    assert res.F == pytest.approx(13.5, abs=1e-12)
    assert res.p == pytest.approx(f_oneway([1, 2, 3], [4, 5, 6]).pvalue, abs=1e-12)


def test_anova_degenerate_cases():
    res = anova_oneway([[1, 2, 3], [1, 2, 3]])
    assert (res.F, res.p) == (0.0, 1.0)
    res = anova_oneway([[2, 2], [2, 2], [2, 2]])
    assert (res.F, res.p) == (0.0, 1.0)
    res = anova_oneway([[1, 1], [2, 2]])
    assert res.F == math.inf and res.p == 0.0


@pytest.mark.parametrize("seed", range(100))
def test_anova_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    groups = [rng.normal(loc=rng.normal(), size=int(rng.integers(3, 12))) for _ in range(int(rng.integers(2, 5)))]
    res = anova_oneway(groups)
    assert res.F == pytest.approx(oracles.anova_f([g.tolist() for g in groups]), rel=1e-10)
    assert res.p == pytest.approx(f_oneway(*groups).pvalue, abs=1e-10)
    assert len(res.pairwise) == len(groups) * (len(groups) - 1) // 2


def test_anova_shift_invariant():
    rng = np.random.default_rng(1)
    g = [rng.normal(size=8), rng.normal(size=8) + 0.5]
    a, b = anova_oneway(g), anova_oneway([x + 1e6 for x in g])
    assert b.F == pytest.approx(a.F, rel=1e-8)


def test_interval_bounds_are_empirical_quantiles():
    s = np.arange(101.0)[:, None]
    lo, hi = interval_bounds(s, 0.8)
    assert (lo[0], hi[0]) == pytest.approx((10.0, 90.0), abs=1e-12)


def _methods(rng):
    actual = rng.uniform(1, 5, size=(6, 4, 24))
    scen = actual[:, None] + rng.normal(size=(6, 40, 4, 24))
    return scen, actual


def test_report_columns_and_energy():
    rng = np.random.default_rng(2)
    scen, actual = _methods(rng)
    rep = evaluate_methods({"a": scen, "b": scen + 0.5}, actual, ["total", "s1", "s2", "s3"])
    row = rep.rows[0]
    for lvl in QL_LEVELS:
        assert f"QL({lvl:g})" in row
    for lvl in WS_LEVELS:
        assert f"WS({lvl:g})" in row
    assert {"MAE", "RMSE", "MASE(24)", "MASE(168)"} <= set(row)
    assert rep.energy["a"].shape == (6 * 24,)
    assert rep.energy_flat["a"].shape == (6,)
    s0 = scen[0, :, :, 5]
    assert rep.energy["a"][5] == pytest.approx(oracles.energy_score(s0.tolist(), actual[0, :, 5].tolist()), rel=1e-10)
    assert "a|b" in rep.anova["energy"].pairwise


def test_identical_inputs_identical_rows():
    rng = np.random.default_rng(3)
    scen, actual = _methods(rng)
    rep = evaluate_methods({"x": scen, "y": scen.copy()}, actual, ["total", "s1", "s2", "s3"])
    half = len(rep.rows) // 2
    for r1, r2 in zip(rep.rows[:half], rep.rows[half:]):
        assert {k: v for k, v in r1.items() if k != "method"} == {k: v for k, v in r2.items() if k != "method"}


def test_report_shape_mismatch():
    rng = np.random.default_rng(4)
    scen, actual = _methods(rng)
    with pytest.raises(ContractViolation):
        evaluate_methods({"a": scen[:, :, :3]}, actual, ["total", "s1", "s2", "s3"])


def test_report_files(tmp_path):
    rng = np.random.default_rng(5)
    scen, actual = _methods(rng)
    actual[:, 1] = 1.0  # flat series: MASE undefined
    rep = evaluate_methods({"a": scen, "b": scen * 1.1}, actual, ["total", "s1", "s2", "s3"])
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["rows"][1]["MASE(24)"] is None
    assert "undefined" in (tmp_path / "r.csv").read_text()
