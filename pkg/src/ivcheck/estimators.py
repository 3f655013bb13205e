"""First-step parametric estimators: OLS, linear IV, two-step GMM, Box-Cox profile NLS."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import Dataset
from .errors import DomainError, RankDeficient, RelevanceWarning, SingularWeight

RELEVANCE_F_THRESHOLD = 10.0

# Default lambda grid for the Box-Cox profile: 81 points on [-2, 2], step 0.05.
DEFAULT_LAMBDA_GRID = np.round(np.linspace(-2.0, 2.0, 81), 10)


class FitMethod(Enum):
    OLS = "ols"
    IV = "iv"
    GMM2STEP = "gmm2step"


@dataclass(frozen=True)
class LinearFit:
    beta: np.ndarray
    vcov: np.ndarray
    residuals: np.ndarray
    method: FitMethod
    sigma2_hat: float
    intercept: bool
    first_stage_f: float | None = None
    beta_first_step: np.ndarray | None = None

    def predict(self, x: np.ndarray) -> np.ndarray:
        d = _design(np.asarray(x, dtype=float), self.intercept)
        return d @ self.beta


@dataclass(frozen=True)
class BoxCoxFit:
    lam: float
    beta0: float
    beta1: float
    residuals: np.ndarray
    profile_sse_curve: np.ndarray  # (n_lambda, 2) columns (lambda, SSE)
    use_iv: bool

    @property
    def theta(self):
        return (self.beta0, self.beta1, self.lam)


def _design(x: np.ndarray, intercept: bool) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if intercept:
        return np.column_stack([np.ones(x.shape[0]), x])
    return x


def _check_rank(mat: np.ndarray, what: str) -> None:
    sv = np.linalg.svd(mat, compute_uv=False)
    n = mat.shape[0]
    if sv[-1] <= n * np.finfo(float).eps * sv[0]:
        raise RankDeficient(f"{what} is rank deficient (min singular value {sv[-1]:.3g})")


def _solve(a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    _check_rank(a, what)
    return np.linalg.solve(a, b)


def _sandwich(design_z: np.ndarray, design_x: np.ndarray, resid: np.ndarray) -> np.ndarray:
    """Heteroskedasticity-robust covariance of beta solving E_n[Z (Y - X'b)] = 0."""
    n = design_z.shape[0]
    a = design_z.T @ design_x / n
    meat = (design_z * resid[:, None]).T @ (design_z * resid[:, None]) / n
    a_inv = np.linalg.inv(a)
    return a_inv @ meat @ a_inv.T / n


def fit_ols(ds: Dataset, intercept: bool = True) -> LinearFit:
    """Least squares of y on x, robust (sandwich) covariance."""
    d = _design(ds.x, intercept)
    _check_rank(d, "OLS design matrix")
    beta, *_ = np.linalg.lstsq(d, ds.y, rcond=None)
    resid = ds.y - d @ beta
    vcov = _sandwich(d, d, resid)
    return LinearFit(
        beta=beta,
        vcov=vcov,
        residuals=resid,
        method=FitMethod.OLS,
        sigma2_hat=float(np.mean(resid**2)),
        intercept=intercept,
    )


def _first_stage_f(ds: Dataset, intercept: bool) -> float:
    """F-statistic of the excluded instruments in the first stage, minimum over x columns."""
    dz = _design(ds.z, intercept)
    n, kz = dz.shape
    fs = []
    for j in range(ds.k_x):
        xj = ds.x[:, j]
        g, *_ = np.linalg.lstsq(dz, xj, rcond=None)
        rss1 = float(np.sum((xj - dz @ g) ** 2))
        if intercept:
            rss0 = float(np.sum((xj - xj.mean()) ** 2))
            q = kz - 1
        else:
            rss0 = float(np.sum(xj**2))
            q = kz
        dof = n - kz
        if q <= 0 or dof <= 0 or rss1 <= 0:
            fs.append(np.inf)
        else:
            fs.append((rss0 - rss1) / q / (rss1 / dof))
    return float(min(fs))


def fit_iv(ds: Dataset, intercept: bool = True) -> LinearFit:
    """Just-identified linear IV: beta = E_n[Z X']^-1 E_n[Z Y]."""
    if ds.k_z != ds.k_x:
        raise RankDeficient(
            f"fit_iv needs a just-identified system (k_z={ds.k_z}, k_x={ds.k_x})"
        )
    dz = _design(ds.z, intercept)
    dx = _design(ds.x, intercept)
    n = ds.n
    beta = _solve(dz.T @ dx / n, dz.T @ ds.y / n, "E_n[ZX']")
    resid = ds.y - dx @ beta
    f_stat = _first_stage_f(ds, intercept)
    if f_stat < RELEVANCE_F_THRESHOLD:
        warnings.warn(
            f"first-stage F = {f_stat:.2f} < {RELEVANCE_F_THRESHOLD:g}: weak instrument",
            RelevanceWarning,
            stacklevel=2,
        )
    vcov = _sandwich(dz, dx, resid)
    return LinearFit(
        beta=beta,
        vcov=vcov,
        residuals=resid,
        method=FitMethod.IV,
        sigma2_hat=float(np.mean(resid**2)),
        intercept=intercept,
        first_stage_f=f_stat,
    )


def polynomial_instruments(degree: int = 3):
    """h(z) = (z, z^2, ..., z^degree) applied columnwise; degree 3 by default."""

    def h(z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        return np.column_stack([z**d for d in range(1, degree + 1)])

    return h


def gmm_beta(
    h_design: np.ndarray, dx: np.ndarray, y: np.ndarray, weight: np.ndarray
) -> np.ndarray:
    """Linear GMM minimizer of g(b)' W g(b), g(b) = E_n[h (y - x'b)]."""
    n = h_design.shape[0]
    hx = h_design.T @ dx / n
    hy = h_design.T @ y / n
    a = hx.T @ weight @ hx
    _check_rank(a, "GMM normal matrix")
    return np.linalg.solve(a, hx.T @ weight @ hy)


def fit_gmm2step(ds: Dataset, instrument_fn=None, intercept: bool = True) -> LinearFit:
    """Two-step efficient GMM on moments E[h(Z) U] = 0.

    First step weights by (E_n[hh'])^-1; second step by the inverse of the
    first-step residual outer-product matrix.
    """
    if instrument_fn is None:
        instrument_fn = polynomial_instruments(3)
    h_raw = instrument_fn(ds.z)
    h_design = _design(h_raw, intercept)
    dx = _design(ds.x, intercept)
    n = ds.n
    if h_design.shape[1] < dx.shape[1]:
        raise RankDeficient("dim h(Z) below the number of parameters")
    hh = h_design.T @ h_design / n
    _check_rank(hh, "E_n[hh']")
    w1 = np.linalg.inv(hh)
    beta1 = gmm_beta(h_design, dx, ds.y, w1)
    r1 = ds.y - dx @ beta1
    omega = (h_design * r1[:, None]).T @ (h_design * r1[:, None]) / n
    sv = np.linalg.svd(omega, compute_uv=False)
    if sv[-1] <= n * np.finfo(float).eps * sv[0]:
        raise SingularWeight("second-step weight matrix is singular")
    w2 = np.linalg.inv(omega)
    beta2 = gmm_beta(h_design, dx, ds.y, w2)
    resid = ds.y - dx @ beta2
    # Asymptotic covariance of efficient GMM: (G' Omega^-1 G)^-1 / n.
    g = h_design.T @ dx / n
    vcov = np.linalg.inv(g.T @ w2 @ g) / n
    return LinearFit(
        beta=beta2,
        vcov=vcov,
        residuals=resid,
        method=FitMethod.GMM2STEP,
        sigma2_hat=float(np.mean(resid**2)),
        intercept=intercept,
        beta_first_step=beta1,
    )


def boxcox_transform(x: np.ndarray, lam: float) -> np.ndarray:
    """x^(lambda) with the log branch at lambda = 0; requires x > 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("Box-Cox transform requires strictly positive x")
    if lam == 0.0:
        return np.log(x)
    return (x**lam - 1.0) / lam


def fit_boxcox(
    ds: Dataset,
    lambda_grid=None,
    use_iv: bool = False,
    intercept: bool = True,
) -> BoxCoxFit:
    """Profile grid search over lambda, linear step by OLS or just-identified IV.

    For each grid lambda the outcome is regressed on the transformed regressor
    (instrumented by z when use_iv); the structural sum of squared residuals is
    profiled, and the coarse minimizer is polished on successively finer local
    grids. Assumes a scalar regressor.
    """
    if ds.k_x != 1:
        raise DomainError("fit_boxcox expects a scalar regressor")
    if lambda_grid is None:
        lambda_grid = DEFAULT_LAMBDA_GRID
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if lambda_grid.size == 0 or np.any(np.diff(lambda_grid) <= 0):
        raise DomainError("lambda_grid must be non-empty and strictly increasing")
    x = ds.x[:, 0]
    if np.any(x <= 0):
        raise DomainError("Box-Cox transform requires strictly positive x")
    y = ds.y
    n = ds.n
    dz = _design(ds.z[:, :1], intercept) if use_iv else None

    def sweep(grid):
        rows = np.empty((len(grid), 2))
        top = None
        for i, lam in enumerate(grid):
            xt = boxcox_transform(x, lam)
            d = _design(xt, intercept)
            if use_iv:
                beta = _solve(dz.T @ d / n, dz.T @ y / n, "E_n[Z X^(lambda)']")
            else:
                _check_rank(d, "Box-Cox design matrix")
                beta, *_ = np.linalg.lstsq(d, y, rcond=None)
            resid = y - d @ beta
            sse = float(resid @ resid)
            rows[i] = (lam, sse)
            if top is None or sse < top[0]:
                top = (sse, float(lam), beta, resid)
        return rows, top

    curve, best = sweep(lambda_grid)
    # refine around the coarse minimizer: grid spacing otherwise dominates the
    # sampling error of lambda_hat in moderate samples
    span = float(np.max(np.diff(lambda_grid)))
    for _ in range(3):
        span /= 4.0
        local = np.linspace(best[1] - 4.0 * span, best[1] + 4.0 * span, 17)
        _, best = sweep(local)
    _, lam, beta, resid = best
    b0, b1 = (float(beta[0]), float(beta[1])) if intercept else (0.0, float(beta[0]))
    return BoxCoxFit(
        lam=float(lam),
        beta0=b0,
        beta1=b1,
        residuals=resid,
        profile_sse_curve=curve,
        use_iv=use_iv,
    )
