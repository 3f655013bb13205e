import numpy as np
import pytest

from ivcheck.data import RngSpec
from ivcheck.errors import InsufficientData, TooManyCells
from ivcheck.npreg import (
    default_series_order,
    epanechnikov,
    fit_cell_means,
    fit_local_linear,
    fit_series,
    local_linear_weights,
    nonlinear_step_series_order,
    rule_of_thumb_bandwidth,
    series_basis,
)
from ivcheck.simulate import DgpFamily, DgpSpec, generate
from ivcheck.estimators import fit_iv


def test_series_exact_linear():
    g = np.random.default_rng(0)
    z = g.uniform(-2, 2, 100)
    w = 2.0 + 3.0 * z
    fit = fit_series(w, z, order=3)
    for v in (-1.5, 0.0, 1.2):
        th, s = fit.evaluate(v)
        assert abs(th - (2.0 + 3.0 * v)) < 1e-10
        assert s <= 1e-8


def test_series_normal_equations_oracle():
    g = np.random.default_rng(1)
    z = g.uniform(-2, 2, 200)
    w = z**2 + g.standard_normal(200)
    fit = fit_series(w, z, order=4)
    lo, hi = z.min(), z.max()
    b = series_basis(z, 4, lo, hi)
    gamma = np.linalg.solve(b.T @ b, b.T @ w)
    th, _ = fit.evaluate(0.0)
    oracle = series_basis(np.array([0.0]), 4, lo, hi)[0] @ gamma
    assert abs(th - oracle) < 1e-10


def test_series_sup_shrinks_with_n():
    def med_sup(n):
        sups = []
        for rep in range(20):
            ds = generate(DgpSpec(family=DgpFamily.LINEAR_IV_NULL, n=n),
                          RngSpec(seed=55).substream(rep))
            resid = fit_iv(ds).residuals
            fit = fit_series(resid, ds.z[:, 0])
            grid = np.linspace(np.quantile(ds.z, 0.01), np.quantile(ds.z, 0.99), 100)
            sups.append(max(abs(fit.evaluate(v)[0]) for v in grid))
        return np.median(sups)

    assert med_sup(3000) < med_sup(500)


def test_series_insufficient_data():
    with pytest.raises(InsufficientData):
        fit_series(np.arange(3.0), np.arange(3.0), order=5)


def test_series_default_orders():
    assert default_series_order(200) == 16
    assert default_series_order(20) == 16 or default_series_order(20) <= 18
    assert nonlinear_step_series_order(2000) == 7
    assert nonlinear_step_series_order(200) <= nonlinear_step_series_order(20000)


def test_series_basis_span_matches_raw_powers():
    z = np.linspace(0.0, 10.0, 40)
    b = series_basis(z, 3, 0.0, 10.0)
    raw = np.column_stack([z**k for k in range(4)])
    # same column space: projecting raw powers on the basis reproduces them
    proj = b @ np.linalg.lstsq(b, raw, rcond=None)[0]
    assert np.allclose(proj, raw, atol=1e-8)


def test_local_linear_constant():
    g = np.random.default_rng(2)
    z = g.uniform(-1, 1, 60)
    w = np.full(60, 4.2)
    fit = fit_local_linear(w, z, bandwidth=0.5)
    for v in (-0.5, 0.0, 0.5):
        th, _ = fit.evaluate(v)
        assert abs(th - 4.2) < 1e-10


def test_local_linear_hand_oracle():
    z = np.array([-1.0, -0.5, 0.0, 0.3, 0.6, 0.9, 1.4, -1.3, 1.1, 0.45])
    w = np.array([0.2, 0.5, 1.1, 0.9, 1.7, 2.1, 2.4, -0.1, 2.2, 1.3])
    h = 1.0
    fit = fit_local_linear(w, z, bandwidth=h)
    v = 0.1
    k = epanechnikov((z - v) / h)
    d = np.column_stack([np.ones(len(z)), z - v])
    coef = np.linalg.solve(d.T @ (d * k[:, None]), d.T @ (k * w))
    th, _ = fit.evaluate(v)
    assert abs(th - coef[0]) < 1e-10


def test_local_linear_sine_recovery():
    g = np.random.default_rng(3)
    z = g.uniform(-3, 3, 5000)
    w = np.sin(z) + g.standard_normal(5000)
    fit = fit_local_linear(w, z)
    grid = np.linspace(-2.8, 2.8, 50)
    err = max(abs(fit.evaluate(v)[0] - np.sin(v)) for v in grid)
    assert err < 0.1


def test_local_linear_empty_window_reported():
    z = np.array([0.0, 0.1, 0.2, 5.0, 5.1, 5.2, 5.3, 5.4, 5.5, 5.6])
    grid = np.array([0.1, 2.5, 5.3])
    a, ok = local_linear_weights(z, grid, bandwidth=0.5)
    assert ok[0] and ok[2] and not ok[1]


def test_rule_of_thumb_bandwidth():
    z = np.random.default_rng(4).standard_normal(1000)
    assert abs(rule_of_thumb_bandwidth(z) - 1.06 * np.std(z) * 1000**-0.2) < 1e-12


def test_cell_means_exact():
    z = np.array([1.0, 1.0, 2.0, 2.0, 3.0, 3.0])
    w = np.array([0.5, 1.5, 1.5, 2.5, 2.5, 3.5])
    fit = fit_cell_means(w, z)
    for v, m in ((1.0, 1.0), (2.0, 2.0), (3.0, 3.0)):
        th, _ = fit.evaluate(v)
        assert th == m


def test_cell_means_group_by_oracle():
    g = np.random.default_rng(5)
    z = g.integers(0, 5, 300).astype(float)
    w = g.standard_normal(300)
    fit = fit_cell_means(w, z)
    for v in np.unique(z):
        th, s = fit.evaluate(v)
        cell = w[z == v]
        assert abs(th - cell.mean()) < 1e-12
        assert abs(s - cell.std(ddof=1) / np.sqrt(len(cell))) < 1e-10


def test_cell_means_too_many_cells():
    z = np.arange(100.0)
    with pytest.raises(TooManyCells):
        fit_cell_means(np.zeros(100), z)


def test_smoother_linearity_and_scale():
    g = np.random.default_rng(6)
    z = g.uniform(-1, 1, 150)
    w1 = g.standard_normal(150)
    w2 = g.standard_normal(150)
    for fitter in (lambda w: fit_series(w, z, order=4),
                   lambda w: fit_local_linear(w, z, bandwidth=0.7),
                   lambda w: fit_cell_means(w, np.round(z))):
        fa, fb = fitter(w1), fitter(w2)
        fc = fitter(2.0 * w1 - 3.0 * w2)
        v = 0.0
        assert abs(fc.evaluate(v)[0] - (2.0 * fa.evaluate(v)[0] - 3.0 * fb.evaluate(v)[0])) < 1e-9
        fs = fitter(5.0 * w1)
        assert abs(fs.evaluate(v)[1] - 5.0 * fa.evaluate(v)[1]) < 1e-9
