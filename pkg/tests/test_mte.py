import numpy as np
import pytest

from ivcheck.data import Dataset
from ivcheck.errors import MissingBounds, OffSupport
from ivcheck.mte import (
    condition1_diagnostic,
    estimate_asf,
    estimate_mte,
    fit_control_function,
    fit_propensity,
    ks_distance_uniform,
    pava_increasing,
    quantile_roundtrip_check,
    uniformity_diagnostic,
)


def _heterogeneous_ds(n=5000, seed=42):
    g = np.random.default_rng(seed)
    z = g.uniform(0, 1, n)
    v = g.uniform(0, 1, n)
    x = 3.0 * z + v
    y = x * (1.0 + v) + 0.1 * g.standard_normal(n)
    return Dataset(y=y, x=x, z=z), v


def test_pava_increasing():
    y = np.array([1.0, 3.0, 2.0, 4.0])
    out = pava_increasing(y)
    assert np.all(np.diff(out) >= 0)
    assert np.allclose(out, [1.0, 2.5, 2.5, 4.0])


def test_propensity_additive_analytic():
    g = np.random.default_rng(0)
    n = 5000
    z = g.uniform(0, 1, n)
    x = z + g.uniform(0, 1, n)
    ds = Dataset(y=np.zeros(n), x=x, z=z)
    pf = fit_propensity(ds)
    # analytic P(z, x) = clip(x - z, 0, 1)
    errs = [abs(pf.evaluate(zv, zv + 0.5) - 0.5) for zv in (0.2, 0.5, 0.8)]
    assert max(errs) < 0.05
    assert np.all(pf.v_hat >= 0) and np.all(pf.v_hat <= 1)


def test_propensity_independent_case():
    g = np.random.default_rng(1)
    n = 5000
    z = g.uniform(0, 1, n)
    x = g.standard_normal(n)
    ds = Dataset(y=np.zeros(n), x=x, z=z)
    pf = fit_propensity(ds)
    xs = np.sort(x)
    gaps = []
    for zv in (0.25, 0.5, 0.75):
        for xv in np.quantile(x, [0.2, 0.5, 0.8]):
            marg = np.searchsorted(xs, xv, side="right") / n
            gaps.append(abs(pf.evaluate(zv, xv) - marg))
    assert max(gaps) < 0.05


def test_propensity_monotone_after_isotonization():
    ds, _ = _heterogeneous_ds(2000, 2)
    pf = fit_propensity(ds)
    for i in range(len(pf.z_grid)):
        assert np.all(np.diff(pf.surface[i]) >= -1e-12)
    assert all(v < 0.2 for v in pf.monotonicity_report.values())


def test_uniformity_diagnostic_valid_dgp():
    ds, _ = _heterogeneous_ds(5000, 3)
    pf = fit_propensity(ds)
    rep = uniformity_diagnostic(pf)
    assert rep.overall < 0.05


def test_ks_uniform_sorted_grid():
    n = 1000
    u = (np.arange(n) + 0.5) / n
    assert ks_distance_uniform(u) <= 1.0 / (2 * n) + 1e-9


def test_control_function_closed_form():
    g = np.random.default_rng(4)
    n = 5000
    z = g.uniform(0, 1, n)
    v = g.uniform(0, 1, n)
    x = 3.0 * z + v
    y = 2.0 * x + v
    ds = Dataset(y=y, x=x, z=z)
    pf = fit_propensity(ds)
    cf = fit_control_function(ds, pf)
    errs = []
    for xv in (1.5, 2.0, 2.5):
        for p in (0.3, 0.5, 0.7):
            errs.append(abs(cf.cond_mean(xv, p) - (2.0 * xv + p)))
    assert max(errs) < 0.15


def test_cond_cdf_monotone_in_y():
    ds, _ = _heterogeneous_ds(2000, 5)
    pf = fit_propensity(ds)
    cf = fit_control_function(ds, pf)
    vals = [cf.cond_cdf(2.0, 0.5, y) for y in np.linspace(ds.y.min(), ds.y.max(), 15)]
    assert np.all(np.diff(vals) >= -1e-12)
    assert all(0.0 <= v <= 1.0 for v in vals)


def test_mte_zero_at_equal_points():
    ds, _ = _heterogeneous_ds(2000, 6)
    pf = fit_propensity(ds)
    cf = fit_control_function(ds, pf)
    assert estimate_mte(cf, 0.5, 2.0, 2.0) == 0.0


def test_mte_antisymmetry():
    ds, _ = _heterogeneous_ds(3000, 7)
    pf = fit_propensity(ds)
    cf = fit_control_function(ds, pf)
    a = estimate_mte(cf, 0.5, 2.2, 1.8)
    b = estimate_mte(cf, 0.5, 1.8, 2.2)
    assert abs(a + b) < 1e-12


def test_mte_homogeneous_effect():
    g = np.random.default_rng(8)
    n = 5000
    z = g.uniform(0, 1, n)
    v = g.uniform(0, 1, n)
    x = 3.0 * z + v
    y = 2.0 * x + 0.2 * g.standard_normal(n)
    ds = Dataset(y=y, x=x, z=z)
    pf = fit_propensity(ds)
    cf = fit_control_function(ds, pf)
    for p in (0.3, 0.5, 0.7):
        assert abs(estimate_mte(cf, p, 2.2, 1.8) - 0.8) < 0.2


def test_mte_heterogeneous_oracle():
    ds, _ = _heterogeneous_ds()
    pf = fit_propensity(ds)
    cf = fit_control_function(ds, pf)
    for p in np.linspace(0.1, 0.9, 9):
        est = estimate_mte(cf, float(p), 2.2, 1.8)
        assert abs(est - 0.4 * (1.0 + p)) < 0.25


def test_asf_point_full_support():
    ds, _ = _heterogeneous_ds()
    pf = fit_propensity(ds)
    cf = fit_control_function(ds, pf)
    asf = estimate_asf(cf, pf, 2.0)
    assert asf.is_point
    assert abs(asf.value - 3.0) < 0.15  # E[x (1+V)] at x=2 is 2 * 1.5


def test_asf_partial_support_width_exact():
    ds, _ = _heterogeneous_ds()
    pf = fit_propensity(ds)
    cf = fit_control_function(ds, pf)
    lo, hi = float(ds.y.min()), float(ds.y.max())
    asf = estimate_asf(cf, pf, 0.5, outcome_bounds=(lo, hi))
    assert not asf.is_point
    width = asf.interval[1] - asf.interval[0]
    p_lo, p_hi = asf.support
    assert abs(width - (hi - lo) * (1.0 - p_hi + p_lo)) < 1e-10


def test_asf_partial_needs_bounds():
    ds, _ = _heterogeneous_ds(3000, 9)
    pf = fit_propensity(ds)
    cf = fit_control_function(ds, pf)
    with pytest.raises(MissingBounds):
        estimate_asf(cf, pf, 0.5)


def test_off_support_raises():
    ds, _ = _heterogeneous_ds(2000, 10)
    pf = fit_propensity(ds)
    cf = fit_control_function(ds, pf)
    with pytest.raises(OffSupport):
        estimate_mte(cf, 0.5, 50.0, 50.0)


def test_location_equivariance():
    ds, _ = _heterogeneous_ds(3000, 11)
    pf = fit_propensity(ds)
    cf = fit_control_function(ds, pf)
    ds2 = Dataset(y=ds.y + 10.0, x=ds.x, z=ds.z)
    cf2 = fit_control_function(ds2, pf)
    assert abs(cf2.cond_mean(2.0, 0.5) - cf.cond_mean(2.0, 0.5) - 10.0) < 1e-9
    assert abs(estimate_mte(cf2, 0.5, 2.2, 1.8) - estimate_mte(cf, 0.5, 2.2, 1.8)) < 1e-9


def test_condition1_additive_no_violations():
    g = np.random.default_rng(12)
    n = 3000
    z = g.uniform(0, 1, n)
    x = 2.0 * z + g.uniform(0, 1, n)
    ds = Dataset(y=np.zeros(n), x=x, z=z)
    rep = condition1_diagnostic(fit_propensity(ds), ds)
    assert rep.injectivity_violations == 0


def test_quantile_roundtrip_distinct_values():
    g = np.random.default_rng(13)
    ds = Dataset(y=g.standard_normal(200), x=g.standard_normal(200),
                 z=g.integers(0, 3, 200).astype(float))
    assert quantile_roundtrip_check(ds) == 0


def test_quantile_roundtrip_with_ties_six_point_multiset():
    x = np.array([1.0, 1.0, 2.0, 2.0, 2.0, 3.0])
    z = np.zeros(6)
    ds = Dataset(y=np.zeros(6), x=x, z=z)
    assert quantile_roundtrip_check(ds) == 0
    # adversarial: the right-continuous inverse breaks the identity on this multiset
    xs = np.sort(x)
    n = len(xs)
    f = np.searchsorted(xs, x, side="right") / n
    right_cont = np.array([xs[min(np.searchsorted(np.arange(1, n + 1) / n, u, side="right"),
                                  n - 1)] for u in f])
    assert np.any(right_cont != x)


def test_quantile_roundtrip_many_random_datasets():
    violations = 0
    for i in range(200):
        g = np.random.default_rng(i)
        m = int(g.integers(20, 120))
        z = g.integers(0, 4, m).astype(float) if i % 2 else g.uniform(0, 1, m)
        x = np.round(g.standard_normal(m), 1) if i % 3 == 0 else g.standard_normal(m)
        violations += quantile_roundtrip_check(Dataset(y=np.zeros(m), x=x, z=z))
    assert violations == 0
