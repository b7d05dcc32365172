import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from matchkit.data import normalize_scales, select_base
from matchkit.estimator import (EfficiencyDistribution, EfficiencySeries, KernelConfig, NoLocalSupportError,
                                TracingError, _cdf_many, conditional_cdf, conditional_quantile, default_a_grid,
                                estimate_efficiency, evaluate_matching_function, monotone_inverse,
                                rearrange_column, recover_efficiency, trace_efficiency_distribution)
from matchkit.simulation import DgpConfig, fine_a_grid, generate_cd_dgp

from conftest import make_panel

FINE = KernelConfig(a_grid=fine_a_grid())


@pytest.fixture(scope="module")
def scaled600(cd_panel_600):
    panel, truth = cd_panel_600
    return normalize_scales(panel), truth


@pytest.fixture(scope="module")
def est600(cd_panel_600):
    panel, truth = cd_panel_600
    return estimate_efficiency(panel, cfg=FINE), truth


def _weighted_quantile(H, w, p):
    order = np.argsort(H)
    cw = np.cumsum(w[order]) / w.sum()
    return H[order][np.searchsorted(cw, p)]


def test_cdf_bounds_and_monotone(scaled600):
    s, _ = scaled600
    hs = np.linspace(s.H.min() * 0.9, s.H.max() * 1.1, 50)
    vals = [conditional_cdf(s, h, 1.0, 1.0) for h in hs]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert np.all(np.diff(vals) >= -1e-15)
    assert vals[0] == 0.0 and vals[-1] == 1.0


def test_cdf_matches_direct_weighted_share(scaled600):
    s, _ = scaled600
    u, v, h, bw = 1.001, 0.995, float(np.median(s.H)), 0.01
    w = np.exp(-0.5 * (((s.U - u) / bw) ** 2 + ((s.V - v) / bw) ** 2))
    expect = (w * (s.H < h)).sum() / w.sum()
    assert conditional_cdf(s, h, u, v) == pytest.approx(expect, abs=1e-12)


def test_no_local_support():
    p = make_panel([1.0, 1.1, 0.9], [1.0, 1.01, 0.99], [1.0, 1.0, 1.0])
    with pytest.raises(NoLocalSupportError):
        conditional_cdf(p, 1.0, 50.0, 50.0)
    with pytest.raises(NoLocalSupportError):
        conditional_quantile(p, 0.5, 50.0, 50.0)


def test_quantile_boundaries(scaled600):
    s, _ = scaled600
    cfg = KernelConfig()
    assert conditional_quantile(s, 0.0, 1.0, 1.0, cfg) == pytest.approx(s.H.min())
    assert conditional_quantile(s, 1.0, 1.0, 1.0, cfg) <= s.H.max()
    with pytest.raises(ValueError):
        conditional_quantile(s, 1.5, 1.0, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 0.9))
def test_quantile_cdf_roundtrip(p):
    panel, _ = generate_cd_dgp(DgpConfig(T=300, seed=11))
    s = normalize_scales(panel)
    h = conditional_quantile(s, p, 1.0, 1.0)
    assert conditional_cdf(s, h, 1.0, 1.0) == pytest.approx(p, abs=0.02)


def test_median_vs_weighted_median(scaled600):
    s, _ = scaled600
    u, v, bw = 1.0, 1.0, 0.01
    w = np.exp(-0.5 * (((s.U - u) / bw) ** 2 + ((s.V - v) / bw) ** 2))
    oracle = _weighted_quantile(s.H, w, 0.5)
    assert conditional_quantile(s, 0.5, u, v) == pytest.approx(oracle, rel=0.02)


def test_median_vs_bootstrap_resample(scaled600):
    # weighted resampling of the local hires distribution, an independent estimate of its median
    s, _ = scaled600
    rng = np.random.default_rng(0)
    w = np.exp(-0.5 * (((s.U - 1.0) / 0.01) ** 2 + ((s.V - 1.0) / 0.01) ** 2))
    draws = rng.choice(s.H, size=200_000, p=w / w.sum())
    assert conditional_quantile(s, 0.5, 1.0, 1.0) == pytest.approx(np.median(draws), rel=0.02)


def test_base_efficiency_is_one(est600):
    est, _ = est600
    b = est.distribution.base
    i = est.panel.index_of(b.market_id, b.period)
    assert est.series.A[i] == 1.0
    assert est.series.flag[i] == "base"


def test_traced_at_one_is_base_percentile(scaled600):
    # at a = 1, u = U0 the traced cell is G(H0 | U0, V0)
    s, _ = scaled600
    b = select_base(s)
    dist = trace_efficiency_distribution(s, b, FINE, u_grid=np.array([b.U0, 1.002 * b.U0]))
    direct = conditional_cdf(s, b.H0, b.U0, b.V0)
    assert dist.cdf(1.0, b.U0) == pytest.approx(direct, abs=1e-12)


def test_traced_cells_follow_crs_map(scaled600):
    # column u = 2 U0 is G(2a H0 | 2 U0, 2a V0) up to rearrangement
    s, _ = scaled600
    b = select_base(s)
    ag = np.geomspace(0.25, 0.75, 41)
    cfg = KernelConfig(bandwidth=0.5, a_grid=ag)
    dist = trace_efficiency_distribution(s, b, cfg, u_grid=np.array([b.U0, 2 * b.U0]))
    direct, _ = _cdf_many(s.H, s.U, s.V, 2 * ag * b.H0, 2 * b.U0, 2 * ag * b.V0, 0.5)
    np.testing.assert_allclose(dist.F[:, 1], np.sort(direct), atol=1e-12)


def test_traced_law_matches_sample_law(est600):
    # with A independent of (U, V), F(a | U0) is the law of A' relative to the base draw
    est, truth = est600
    Am = truth.A_matching
    b = est.distribution.base
    i = est.panel.index_of(b.market_id, b.period)
    for a in (0.95, 0.97, 1.0, 1.03):
        assert est.distribution.cdf(a, b.U0) == pytest.approx(np.mean(Am < a * Am[i]), abs=0.06)


def test_stationary_law_is_rough_guide(est600):
    est, truth = est600
    cfg = DgpConfig(T=600, seed=3)
    b = est.distribution.base
    i = est.panel.index_of(b.market_id, b.period)
    mu = cfg.mean_log_A / cfg.sigma_U
    sd = cfg.sd_A / np.sqrt(1 - cfg.rho_A ** 2) / cfg.sigma_U
    for a in (0.95, 1.0, 1.05):
        oracle = norm.cdf((np.log(a * truth.A_matching[i]) - mu) / sd)
        assert est.distribution.cdf(a, b.U0) == pytest.approx(oracle, abs=0.15)


def test_percentiles_track_true_ranks(est600):
    est, truth = est600
    ranks = np.argsort(np.argsort(truth.A)) / (truth.A.size - 1)
    assert np.corrcoef(est.series.percentile, ranks)[0, 1] > 0.9


def test_rearrangement_properties():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=30)
    x[[3, 17]] = np.nan
    y = rearrange_column(x)
    fin = np.isfinite(y)
    assert np.array_equal(fin, np.isfinite(x))
    assert np.all(np.diff(y[fin]) >= 0)
    np.testing.assert_array_equal(np.sort(y[fin]), np.sort(x[fin]))
    mono = np.sort(rng.uniform(size=10))
    np.testing.assert_array_equal(rearrange_column(mono), mono)


def test_traced_columns_monotone(est600):
    est, _ = est600
    F = est.distribution.F
    for j in range(F.shape[1]):
        col = F[:, j][np.isfinite(F[:, j])]
        assert np.all(np.diff(col) >= 0)
        assert col.min() >= 0 and col.max() <= 1


def test_recovery_quality(est600):
    est, truth = est600
    assert np.corrcoef(np.log(est.series.A), np.log(truth.A_matching))[0, 1] > 0.95


def test_constant_efficiency_recovers_ones():
    panel, truth = generate_cd_dgp(DgpConfig(T=400, sd_A=0.0, seed=5))
    assert np.ptp(truth.A) == 0
    est = estimate_efficiency(panel, cfg=FINE)
    assert np.median(np.abs(np.log(est.series.A))) < 0.02


def test_units_invariance(cd_panel_200):
    panel, _ = cd_panel_200
    a = estimate_efficiency(panel, cfg=FINE).series.A
    df = panel.frame.copy()
    df["hires"] *= 7.0
    df["unemployed"] *= 0.003
    df["vacancies"] *= 250.0
    from matchkit.data import panel_from_frame
    b = estimate_efficiency(panel_from_frame(df), cfg=FINE).series.A
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_monotone_inverse():
    x = np.log(np.array([0.5, 1.0, 2.0, 4.0]))
    F = np.array([0.1, 0.4, 0.4, 0.9])
    assert monotone_inverse(0.05, F, x) == (x[0], "clipped_low")
    assert monotone_inverse(0.95, F, x) == (x[-1], "clipped_high")
    assert monotone_inverse(0.4, F, x)[0] == pytest.approx(0.5 * (x[1] + x[2]))
    assert monotone_inverse(0.25, F, x)[0] == pytest.approx(0.5 * (x[0] + x[1]))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0))
def test_inverse_roundtrip_within_one_step(q):
    grid = default_a_grid(101, 0.5, 2.0)
    x = np.log(grid)
    F = norm.cdf(x / 0.2)
    target = x[0] + q * (x[-1] - x[0])
    got, flag = monotone_inverse(float(norm.cdf(target / 0.2)), F, x)
    assert flag == ""
    assert abs(got - target) <= np.diff(x).max()


def test_matching_function_at_base(est600):
    est, _ = est600
    b = est.distribution.base
    h = evaluate_matching_function(est.panel, est.distribution, 1.0, b.U0, b.V0)
    assert h == pytest.approx(b.H0, rel=0.01)


def test_matching_function_monotone_in_a(est600):
    est, _ = est600
    b = est.distribution.base
    vals = [evaluate_matching_function(est.panel, est.distribution, a, b.U0, b.V0) for a in (0.95, 0.98, 1.0, 1.02, 1.05)]
    assert np.all(np.diff(vals) >= 0)


def test_matching_function_reproduces_hires(est600):
    est, _ = est600
    s = est.panel
    idx = np.arange(0, len(s), 10)
    fitted = np.array([evaluate_matching_function(s, est.distribution, est.series.A[i], s.U[i], s.V[i]) for i in idx])
    assert np.median(np.abs(fitted / s.H[idx] - 1.0)) < 0.05


def test_distribution_serialization(est600, tmp_path):
    est, _ = est600
    path = tmp_path / "d.json"
    est.distribution.save(path)
    import json
    back = EfficiencyDistribution.from_dict(json.loads(path.read_text()))
    np.testing.assert_array_equal(np.isnan(back.F), np.isnan(est.distribution.F))
    np.testing.assert_allclose(back.F, est.distribution.F, equal_nan=True)
    assert back.base == est.distribution.base


def test_series_roundtrip(est600, tmp_path):
    est, _ = est600
    path = tmp_path / "e.csv"
    est.series.save(path)
    back = EfficiencySeries.load(path)
    np.testing.assert_array_equal(back.A, est.series.A)
    np.testing.assert_array_equal(back.aligned(est.panel), est.series.A)


def test_series_must_cover_panel(est600):
    est, _ = est600
    s = est.series
    short = EfficiencySeries(s.market_id[1:], s.period[1:], s.A[1:], s.percentile[1:], s.flag[1:])
    with pytest.raises(ValueError):
        short.aligned(est.panel)


def test_config_validation():
    with pytest.raises(ValueError):
        KernelConfig(bandwidth=0)
    with pytest.raises(ValueError):
        KernelConfig(a_grid=np.array([1.0, 0.5]))
    with pytest.raises(ValueError):
        KernelConfig(u_grid_size=1)
    assert 1.0 in default_a_grid()


def test_tracing_fails_without_support():
    p = make_panel(np.linspace(1, 2, 40), np.linspace(1, 1.1, 40), np.linspace(1, 1.1, 40))
    s = normalize_scales(p)
    b = select_base(s)
    cfg = KernelConfig(a_grid=np.geomspace(50, 100, 5))
    with pytest.raises(TracingError):
        trace_efficiency_distribution(s, b, cfg)


def test_recover_deterministic(cd_panel_200):
    panel, _ = cd_panel_200
    s = normalize_scales(panel)
    dist = trace_efficiency_distribution(s, select_base(s), FINE)
    a = recover_efficiency(s, dist, FINE).A
    b = recover_efficiency(s, dist, FINE).A
    np.testing.assert_array_equal(a, b)


def test_estimation_floor_enforced():
    p = make_panel([1.0] * 5, [1.0] * 5, [1.0] * 5)
    from matchkit.data import ValidationError
    with pytest.raises(ValidationError):
        estimate_efficiency(p)
