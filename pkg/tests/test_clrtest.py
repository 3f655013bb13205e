import numpy as np
import pytest
from scipy import stats

from ivcheck.clrtest import TestConfig as Cfg
from ivcheck.clrtest import first_step_fit, identified_set, run_test
from ivcheck.clrtest import test_model as model_test
from ivcheck.data import Dataset, RngSpec
from ivcheck.errors import EmptyGrid, SimulationBudgetTooSmall
from ivcheck.estimators import fit_iv
from ivcheck.moments import (
    Conditioning,
    ModelForm,
    ModelSpec,
    MomentSystem,
)


def _one_sided(w, cond, desc):
    return MomentSystem(base=np.asarray(w, dtype=float)[:, None],
                        moments=(("w+", 0, 1.0),),
                        conditioning=np.asarray(cond, dtype=float),
                        v_set_desc=desc)
from ivcheck.simulate import DgpFamily, DgpSpec, generate, model_spec_for

IV_SPEC = ModelSpec(form=ModelForm.LINEAR, conditioning=Conditioning.ON_Z)


def _report_invariants(report):
    alphas = sorted(report.alpha_levels, reverse=True)  # e.g. 0.10, 0.05, 0.01
    prev_k, prev_theta, prev_reject = -np.inf, np.inf, True
    for a in alphas:
        lv = report.levels[a]
        assert lv.reject == (lv.theta_corrected > 0.0)
        assert lv.k_crit <= lv.k_crit_full + 1e-12
        # alpha decreasing: k grows, corrected estimate falls, rejection monotone
        assert lv.k_crit >= prev_k - 1e-12
        assert lv.theta_corrected <= prev_theta + 1e-12
        if lv.reject:
            assert prev_reject
        prev_k, prev_theta, prev_reject = lv.k_crit, lv.theta_corrected, lv.reject


def test_interior_null_never_rejects():
    g = np.random.default_rng(0)
    n = 2000
    z = g.uniform(-1, 1, n)
    w = -1.0 + 0.1 * g.standard_normal(n)
    ms = _one_sided(w, z, "interior null")
    report = run_test(ms, None, Cfg(), RngSpec(seed=1))
    for a in report.alpha_levels:
        assert not report.levels[a].reject
    _report_invariants(report)


def test_two_cell_max_gaussian_critical_value():
    g = np.random.default_rng(1)
    n = 4000
    z = np.repeat([0.0, 1.0], n // 2)
    w = g.standard_normal(n)
    ms = _one_sided(w, z, "two gaussian cells")
    report = run_test(ms, None, Cfg(method="cell-means", mult_draws=4000),
                      RngSpec(seed=2))
    # analytic 95% quantile of the max of two independent standard normals:
    # solve Phi(q)^2 = 0.95
    q = stats.norm.ppf(np.sqrt(0.95))
    assert abs(report.levels[0.05].k_crit_full - q) < 0.05


def test_size_linear_iv_null_moderate():
    rejections = 0
    base = RngSpec(seed=3)
    for rep in range(60):
        ds = generate(DgpSpec(family=DgpFamily.LINEAR_IV_NULL, n=3000), base.substream(rep))
        report = model_test(ds, IV_SPEC, Cfg(), base.substream(rep).substream(7919))
        rejections += report.levels[0.05].reject
    assert rejections <= 10  # ~5% nominal; generous 60-rep bound


def test_report_invariants_on_null_and_power():
    for fam, kw in ((DgpFamily.LINEAR_IV_NULL, {}),
                    (DgpFamily.LINEAR_IV_POWER, {"L": 1.0, "sigma": 0.25})):
        sp = DgpSpec(family=fam, n=1000, **kw)
        ds = generate(sp, RngSpec(seed=4))
        report = model_test(ds, model_spec_for(sp), Cfg(), RngSpec(seed=5))
        _report_invariants(report)


def test_power_dgp_rejects():
    sp = DgpSpec(family=DgpFamily.LINEAR_IV_POWER, n=1000, L=1.0, sigma=0.25)
    rejections = 0
    base = RngSpec(seed=6)
    for rep in range(20):
        ds = generate(sp, base.substream(rep))
        report = model_test(ds, IV_SPEC, Cfg(), base.substream(rep).substream(7919))
        rejections += report.levels[0.05].reject
    assert rejections >= 19


def test_binary_z_never_rejects():
    g = np.random.default_rng(7)
    n = 500
    z = g.integers(0, 2, n).astype(float)
    x = z + g.standard_normal(n)
    y = 2.0 * x + g.standard_normal(n)
    ds = Dataset(y=y, x=x, z=z)
    report = model_test(ds, IV_SPEC, Cfg(method="cell-means"), RngSpec(seed=8))
    assert np.max(np.abs(report.theta)) < 1e-10
    for a in report.alpha_levels:
        assert not report.levels[a].reject


def test_decision_invariant_under_affine_y():
    sp = DgpSpec(family=DgpFamily.LINEAR_IV_POWER, n=800, L=0.5, sigma=0.5)
    ds = generate(sp, RngSpec(seed=9))
    r1 = model_test(ds, IV_SPEC, Cfg(), RngSpec(seed=10))
    ds2 = Dataset(y=4.0 * ds.y + 7.0, x=ds.x, z=ds.z)
    r2 = model_test(ds2, IV_SPEC, Cfg(), RngSpec(seed=10))
    for a in r1.alpha_levels:
        assert r1.levels[a].reject == r2.levels[a].reject
        assert abs(r1.levels[a].k_crit - r2.levels[a].k_crit) < 1e-8


def test_simulation_budget_guard():
    g = np.random.default_rng(11)
    ms = _one_sided(g.standard_normal(100), g.uniform(-1, 1, 100), "small budget")
    with pytest.raises(SimulationBudgetTooSmall):
        run_test(ms, None, Cfg(mult_draws=50), RngSpec(seed=12))


def test_first_step_fit_dispatch():
    ds = generate(DgpSpec(family=DgpFamily.LINEAR_IV_NULL, n=300), RngSpec(seed=13))
    fit = first_step_fit(ds, IV_SPEC)
    assert np.allclose(fit.beta, fit_iv(ds).beta)


def test_diagnostics_record_setup():
    sp = DgpSpec(family=DgpFamily.BOXCOX_IV_NULL, n=400, lam=0.0)
    ds = generate(sp, RngSpec(seed=14))
    report = model_test(ds, model_spec_for(sp), Cfg(), RngSpec(seed=15))
    # nonlinear first step: coarse basis recorded in the report
    assert report.diagnostics["series_order"] <= 7
    assert report.diagnostics["mult_draws"] == 1000
    assert "first_step" in report.diagnostics


def test_identified_set_contains_truth():
    ds = generate(DgpSpec(family=DgpFamily.LINEAR_IV_NULL, n=1500), RngSpec(seed=16))
    fit = fit_iv(ds)
    spec = ModelSpec(form=ModelForm.USER_PARAMETRIC, conditioning=Conditioning.ON_Z,
                     evaluator=lambda x, th: th[0] + th[1] * x[:, 0])
    grid = [(0.0, 2.0), (fit.beta[0], fit.beta[1]), (0.0, -2.0)]
    out = identified_set(ds, spec, grid, alpha=0.05, rng=RngSpec(seed=17))
    assert (0.0, 2.0) in [tuple(t) for t in out.accepted]
    assert tuple(grid[1]) in [tuple(np.asarray(t, dtype=float)) for t in out.accepted]
    assert not out.empty


def test_identified_set_rejects_wrong_sign():
    g = np.random.default_rng(18)
    n = 1500
    z = g.uniform(-3, 3, n)
    x = 3.0 * z + g.standard_normal(n)
    y = 2.0 * x + g.standard_normal(n)
    ds = Dataset(y=y, x=x, z=z)
    spec = ModelSpec(form=ModelForm.USER_PARAMETRIC, conditioning=Conditioning.ON_Z,
                     evaluator=lambda xx, th: th[0] + th[1] * xx[:, 0])
    out = identified_set(ds, spec, [(0.0, -2.0)], alpha=0.05, rng=RngSpec(seed=19))
    assert out.empty


def test_identified_set_empty_grid():
    ds = generate(DgpSpec(family=DgpFamily.LINEAR_IV_NULL, n=200), RngSpec(seed=20))
    spec = ModelSpec(form=ModelForm.USER_PARAMETRIC, conditioning=Conditioning.ON_Z,
                     evaluator=lambda x, th: th[0] + th[1] * x[:, 0])
    with pytest.raises(EmptyGrid):
        identified_set(ds, spec, [], rng=RngSpec(seed=21))
