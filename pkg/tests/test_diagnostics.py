import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from matchkit.diagnostics import (DegenerateRegressionError, market_summaries, ols_residuals,
                                  residual_independence_check)
from matchkit.simulation import DgpConfig, generate_cd_dgp

from conftest import make_panel


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(5, 80))
def test_residuals_orthogonal_and_centred(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = 2.0 + 0.5 * x + rng.normal(size=n)
    e = ols_residuals(y, x)
    assert abs(e.mean()) <= 1e-10
    assert abs(e @ x) <= 1e-10 * max(1.0, np.abs(x).sum() * np.abs(y).max())


def test_residuals_match_linregress():
    rng = np.random.default_rng(1)
    x = rng.normal(size=100)
    y = 1.0 - 0.3 * x + rng.normal(size=100)
    fit = stats.linregress(x, y)
    np.testing.assert_allclose(ols_residuals(y, x), y - fit.intercept - fit.slope * x, atol=1e-12)


def test_no_constant_regression_through_origin():
    rng = np.random.default_rng(2)
    x = rng.uniform(1, 2, 50)
    y = 3.0 * x + rng.normal(size=50)
    e = ols_residuals(y, x, constant=False)
    assert abs(e @ x) <= 1e-9
    slope = (x @ y) / (x @ x)
    np.testing.assert_allclose(e, y - slope * x, atol=1e-12)


def test_independent_dgp_has_small_correlation(cd_panel_600):
    panel, truth = cd_panel_600
    assert abs(residual_independence_check(panel, truth.A).correlation) < 0.1
    rs = [residual_independence_check(*_p(s)).correlation for s in range(10)]
    assert abs(np.mean(rs)) < 0.05


def _p(seed):
    panel, truth = generate_cd_dgp(DgpConfig(T=600, seed=100 + seed))
    return panel, truth.A


def test_dependent_dgp_has_large_correlation():
    panel, truth = generate_cd_dgp(DgpConfig(T=600, seed=1, dependence_knob=1.0))
    assert residual_independence_check(panel, truth.A).correlation > 0.2


def test_affine_efficiency_gives_nan():
    panel, _ = generate_cd_dgp(DgpConfig(T=100, seed=2))
    with pytest.warns(RuntimeWarning):
        chk = residual_independence_check(panel, 3.0 + 2.0 * panel.U)
    assert np.isnan(chk.correlation)


def test_constant_unemployed_raises():
    p = make_panel([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateRegressionError):
        residual_independence_check(p, np.array([1.0, 1.1, 0.9]))


def test_frame_has_keys(cd_panel_200):
    panel, truth = cd_panel_200
    df = residual_independence_check(panel, truth.A).frame(panel)
    assert list(df.columns) == ["market_id", "period", "e_V", "e_A"]
    assert len(df) == len(panel)


def test_market_summaries():
    p = make_panel([2.0, 3.0], [4.0, 6.0], [8.0, 3.0])
    df = market_summaries(p)
    np.testing.assert_allclose(df.tightness, [2.0, 0.5])
    np.testing.assert_allclose(df.job_finding, [0.5, 0.5])
    np.testing.assert_allclose(df.worker_finding, [0.25, 1.0])
    assert list(df.columns) == ["market_id", "period", "tightness", "job_finding", "worker_finding"]
