"""Nonparametric control-function estimation: propensity P(z, x) as the
first-stage rank, conditional potential-outcome surfaces, MTE and ASF.

Used as the fallback when the parametric specification test rejects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, empirical_quantile
from .errors import InsufficientData, IvcheckError, MissingBounds, OffSupport
from .npreg import (
    KERNELS,
    fit_cell_means,
    local_linear_weights,
    rule_of_thumb_bandwidth,
)

FULL_SUPPORT_LO = 0.02
FULL_SUPPORT_HI = 0.98
MIN_EFFECTIVE_OBS = 5
DEFAULT_P_GRID = np.round(np.arange(0.01, 1.0, 0.01), 10)  # 99 points


def pava_increasing(y: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators: closest nondecreasing sequence in least squares."""
    y = np.asarray(y, dtype=float)
    levels = list(y)
    weights = [1.0] * len(y)
    i = 0
    while i < len(levels) - 1:
        if levels[i] > levels[i + 1] + 0.0:
            pooled = (levels[i] * weights[i] + levels[i + 1] * weights[i + 1]) / (
                weights[i] + weights[i + 1]
            )
            weights[i] += weights[i + 1]
            levels[i] = pooled
            del levels[i + 1], weights[i + 1]
            i = max(i - 1, 0)
        else:
            i += 1
    return np.repeat(levels, [int(w) for w in weights])


def _percentile_grid(values: np.ndarray, count: int, lo=0.01, hi=0.99) -> np.ndarray:
    a = empirical_quantile(values, lo)
    b = empirical_quantile(values, hi)
    if not a < b:
        raise IvcheckError("degenerate support for grid construction")
    return np.linspace(a, b, count)


def _interp_clamped(point, grid, values):
    """1-d linear interpolation, clamped to the grid endpoints."""
    return np.interp(point, grid, values)


@dataclass(frozen=True)
class PropensityFit:
    z_grid: np.ndarray
    x_grid: np.ndarray
    surface: np.ndarray  # (len(z_grid), len(x_grid)), isotone in x, clipped to [0,1]
    v_hat: np.ndarray
    monotonicity_report: dict  # z-grid value -> raw violation fraction before isotonization
    method: str

    def evaluate(self, z, x) -> float:
        """Bilinear interpolation of the fitted surface, clamped to [0, 1]."""
        zi = np.clip(np.searchsorted(self.z_grid, z) - 1, 0, len(self.z_grid) - 2)
        row_lo = _interp_clamped(x, self.x_grid, self.surface[zi])
        row_hi = _interp_clamped(x, self.x_grid, self.surface[zi + 1])
        dz = self.z_grid[zi + 1] - self.z_grid[zi]
        t = np.clip((z - self.z_grid[zi]) / dz, 0.0, 1.0) if dz > 0 else 0.0
        return float(np.clip((1 - t) * row_lo + t * row_hi, 0.0, 1.0))

    def support_p_given_x(self, x):
        """[p_lo, p_hi]: range of the fitted propensity over the instrument grid."""
        col = np.clip(
            np.array([_interp_clamped(x, self.x_grid, row) for row in self.surface]),
            0.0,
            1.0,
        )
        return float(col.min()), float(col.max())


def fit_propensity(
    ds: Dataset,
    method: str = "local-linear",
    bandwidth: float | None = None,
    bandwidth_scale: float = 1.0,
    x_grid_count: int = 40,
    z_grid_count: int = 50,
) -> PropensityFit:
    """Estimate P(z, x) = P(X <= x | Z = z) on a grid, clip and isotonize in x.

    Raw monotonicity violations are recorded per z before the correction so
    the strict-monotonicity requirement stays checkable.
    """
    if ds.k_x != 1 or ds.k_z != 1:
        raise IvcheckError("fit_propensity expects scalar x and z")
    x = ds.x[:, 0]
    z = ds.z[:, 0]
    x_grid = _percentile_grid(x, x_grid_count)
    if method == "cell-means":
        z_grid = np.unique(z)
        surface = np.empty((len(z_grid), len(x_grid)))
        for j, xv in enumerate(x_grid):
            cm = fit_cell_means((x <= xv).astype(float), z)
            surface[:, j] = [cm.cells[float(v)][0] for v in z_grid]
    elif method == "local-linear":
        z_grid = _percentile_grid(z, z_grid_count)
        h = bandwidth or rule_of_thumb_bandwidth(z, bandwidth_scale)
        a, ok = local_linear_weights(z, z_grid, h)
        if not np.all(ok):
            z_grid = z_grid[ok]
            a = a[ok]
        indicators = (x[None, :] <= x_grid[:, None]).astype(float)  # (gx, n)
        surface = a @ indicators.T  # (gz, gx)
    else:
        raise IvcheckError(f"unknown propensity method {method!r}")
    surface = np.clip(surface, 0.0, 1.0)
    mono = {}
    iso = np.empty_like(surface)
    for i in range(surface.shape[0]):
        diffs = np.diff(surface[i])
        mono[float(z_grid[i])] = float(np.mean(diffs < 0)) if len(diffs) else 0.0
        iso[i] = np.clip(pava_increasing(surface[i]), 0.0, 1.0)
    pf = PropensityFit(
        z_grid=z_grid,
        x_grid=x_grid,
        surface=iso,
        v_hat=np.empty(0),
        monotonicity_report=mono,
        method=method,
    )
    v_hat = np.array([pf.evaluate(zi, xi) for zi, xi in zip(z, x)])
    return PropensityFit(
        z_grid=z_grid,
        x_grid=x_grid,
        surface=iso,
        v_hat=v_hat,
        monotonicity_report=mono,
        method=method,
    )


def ks_distance_uniform(u: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance of a sample to U[0, 1]."""
    u = np.sort(np.clip(np.asarray(u, dtype=float), 0.0, 1.0))
    n = len(u)
    if n == 0:
        return 1.0
    grid = np.arange(1, n + 1) / n
    return float(max(np.max(grid - u), np.max(u - (grid - 1.0 / n))))


@dataclass(frozen=True)
class UniformityReport:
    overall: float
    by_bin: dict  # bin label -> KS distance within the instrument bin

    @property
    def worst_bin(self) -> float:
        return max(self.by_bin.values()) if self.by_bin else self.overall


def uniformity_diagnostic(pf: PropensityFit, z: np.ndarray | None = None, bins: int = 4) -> UniformityReport:
    """KS distance of v_hat to U[0, 1], overall and within instrument bins."""
    overall = ks_distance_uniform(pf.v_hat)
    by_bin = {}
    if z is not None:
        z = np.asarray(z, dtype=float).ravel()
        edges = np.quantile(z, np.linspace(0, 1, bins + 1))
        for b in range(bins):
            lo, hi = edges[b], edges[b + 1]
            mask = (z >= lo) & (z <= hi) if b == bins - 1 else (z >= lo) & (z < hi)
            if mask.sum() >= 10:
                by_bin[f"z in [{lo:.3g}, {hi:.3g}]"] = ks_distance_uniform(pf.v_hat[mask])
    return UniformityReport(overall=overall, by_bin=by_bin)


@dataclass(frozen=True)
class ControlFunctionFit:
    x: np.ndarray
    v_hat: np.ndarray
    y: np.ndarray
    bandwidth_x: float
    bandwidth_p: float
    kernel: str = "epanechnikov"
    y_grid: np.ndarray = field(default_factory=lambda: np.empty(0))

    def _weights(self, x0: float, p0: float) -> np.ndarray | None:
        kfun = KERNELS[self.kernel]
        k = kfun((self.x - x0) / self.bandwidth_x) * kfun((self.v_hat - p0) / self.bandwidth_p)
        if np.count_nonzero(k) < MIN_EFFECTIVE_OBS:
            return None
        return k

    def on_support(self, x0: float, p0: float) -> bool:
        return self._weights(x0, p0) is not None

    def _local_plane(self, w: np.ndarray, k: np.ndarray, x0: float, p0: float) -> float:
        d = np.column_stack([np.ones(len(w)), self.x - x0, self.v_hat - p0])
        dk = d * k[:, None]
        a = dk.T @ d
        try:
            b = np.linalg.solve(a, dk.T @ w)
        except np.linalg.LinAlgError:
            return float(np.average(w, weights=k))
        return float(b[0])

    def cond_mean(self, x0: float, p0: float) -> float:
        """E[Y | X = x0, first-stage rank = p0] by bivariate local linear regression."""
        k = self._weights(x0, p0)
        if k is None:
            raise OffSupport(x0, p0)
        return self._local_plane(self.y, k, x0, p0)

    def cond_cdf(self, x0: float, p0: float, y_points) -> np.ndarray:
        """P(Y <= y | X = x0, rank = p0) over y_points; isotone in y and in [0, 1]."""
        k = self._weights(x0, p0)
        if k is None:
            raise OffSupport(x0, p0)
        y_points = np.atleast_1d(np.asarray(y_points, dtype=float))
        order = np.argsort(y_points)
        raw = np.array(
            [self._local_plane((self.y <= yv).astype(float), k, x0, p0) for yv in y_points[order]]
        )
        iso = np.clip(pava_increasing(np.clip(raw, 0.0, 1.0)), 0.0, 1.0)
        out = np.empty_like(iso)
        out[order] = iso
        return out


def fit_control_function(
    ds: Dataset,
    pf: PropensityFit,
    bandwidth_x: float | None = None,
    bandwidth_p: float | None = None,
    bandwidth_scale: float = 1.0,
    y_grid_count: int = 25,
) -> ControlFunctionFit:
    """Bivariate local-linear surfaces of Y (and of 1{Y<=y}) on (X, v_hat)."""
    if len(pf.v_hat) != ds.n:
        raise InsufficientData("propensity fit does not match the dataset")
    x = ds.x[:, 0]
    n = ds.n
    # per-coordinate rule of thumb for the bivariate fit
    hx = bandwidth_x or bandwidth_scale * 1.06 * np.std(x) * n ** (-1.0 / 6.0)
    hp = bandwidth_p or bandwidth_scale * 1.06 * max(np.std(pf.v_hat), 0.05) * n ** (-1.0 / 6.0)
    y_grid = np.quantile(ds.y, np.linspace(0.02, 0.98, y_grid_count))
    return ControlFunctionFit(
        x=x,
        v_hat=pf.v_hat,
        y=ds.y,
        bandwidth_x=float(hx),
        bandwidth_p=float(hp),
        y_grid=y_grid,
    )


def estimate_mte(cf: ControlFunctionFit, p: float, x: float, x_prime: float) -> float:
    """MTE(p; x, x') = cond_mean(x, p) - cond_mean(x', p); zero exactly at x = x'."""
    if x == x_prime:
        if not cf.on_support(x, p):
            raise OffSupport(x, p)
        return 0.0
    return cf.cond_mean(x, p) - cf.cond_mean(x_prime, p)


@dataclass(frozen=True)
class AsfEstimate:
    x: float
    value: float | None  # point estimate when the rank support is (conventionally) full
    interval: tuple | None  # (lower, upper) under partial support with outcome bounds
    support: tuple  # (p_lo, p_hi)

    @property
    def is_point(self) -> bool:
        return self.value is not None


def estimate_asf(
    cf: ControlFunctionFit,
    pf: PropensityFit,
    x: float,
    outcome_bounds: tuple | None = None,
    p_grid: np.ndarray = DEFAULT_P_GRID,
) -> AsfEstimate:
    """Integrate cond_mean(x, .) over the first-stage rank.

    Full support (operationally p_lo <= 0.02 and p_hi >= 0.98) gives a point;
    otherwise the partial-identification interval needs outcome bounds and has
    width (Y_u - Y_l) (1 - p_hi + p_lo) exactly.
    """
    p_lo, p_hi = pf.support_p_given_x(x)
    pts = [p for p in np.asarray(p_grid, dtype=float) if p_lo <= p <= p_hi and cf.on_support(x, p)]
    if len(pts) < 2:
        raise OffSupport(x, (p_lo + p_hi) / 2.0)
    pts = np.asarray(pts)
    means = np.array([cf.cond_mean(x, p) for p in pts])
    partial = float(np.trapezoid(means, pts))
    full = p_lo <= FULL_SUPPORT_LO and p_hi >= FULL_SUPPORT_HI
    if full:
        # extend the trapezoid to [0, 1] with flat tails over the tiny gaps
        value = partial + means[0] * pts[0] + means[-1] * (1.0 - pts[-1])
        return AsfEstimate(x=x, value=float(value), interval=None, support=(p_lo, p_hi))
    if outcome_bounds is None:
        raise MissingBounds(
            f"rank support [{p_lo:.3f}, {p_hi:.3f}] at x={x} is partial; supply outcome bounds"
        )
    y_l, y_u = float(outcome_bounds[0]), float(outcome_bounds[1])
    gap = 1.0 - p_hi + p_lo
    return AsfEstimate(
        x=x,
        value=None,
        interval=(partial + y_l * gap, partial + y_u * gap),
        support=(p_lo, p_hi),
    )


def ks_two_sample(a: np.ndarray, b: np.ndarray) -> float:
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / len(a)
    fb = np.searchsorted(b, pooled, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


@dataclass(frozen=True)
class Condition1Report:
    v_grid: np.ndarray
    coverage: dict  # v -> fraction of the x-range spanned by h_v over instrument bins
    injectivity_violations: int
    flagged_pairs: tuple  # (v, bin_i, bin_j, ks_distance)
    monotonicity_violations: float  # mean raw violation fraction from the propensity fit

    @property
    def no_further_implications(self) -> bool:
        """True when no duplicated instrument values were found; only the
        monotone-propensity requirement remains testable."""
        return self.injectivity_violations == 0


def condition1_diagnostic(
    pf: PropensityFit,
    ds: Dataset,
    v_grid=None,
    z_bins: int = 10,
) -> Condition1Report:
    """Surjectivity/injectivity diagnostics for the map z -> Q_{X|Z=z}(v).

    When two instrument bins map to (numerically) the same x at a common rank,
    compares the outcome distributions of the two bins near that x.
    """
    if v_grid is None:
        v_grid = np.round(np.arange(0.1, 1.0, 0.1), 10)
    x = ds.x[:, 0]
    z = ds.z[:, 0]
    edges = np.quantile(z, np.linspace(0, 1, z_bins + 1))
    members = []
    for b in range(z_bins):
        lo, hi = edges[b], edges[b + 1]
        mask = (z >= lo) & (z <= hi) if b == z_bins - 1 else (z >= lo) & (z < hi)
        members.append(mask)
    x_lo = empirical_quantile(x, 0.01)
    x_hi = empirical_quantile(x, 0.99)
    spacing = (pf.x_grid[-1] - pf.x_grid[0]) / max(len(pf.x_grid) - 1, 1)
    tol = 0.5 * spacing
    coverage = {}
    violations = 0
    flagged = []
    for v in np.asarray(v_grid, dtype=float):
        h = np.array(
            [empirical_quantile(x[m], v) if m.sum() >= 5 else np.nan for m in members]
        )
        valid = ~np.isnan(h)
        hv = h[valid]
        if len(hv) == 0:
            coverage[float(v)] = 0.0
            continue
        coverage[float(v)] = float(
            np.clip((hv.max() - hv.min()) / max(x_hi - x_lo, 1e-12), 0.0, 1.0)
        )
        idx = np.flatnonzero(valid)
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                if abs(h[idx[a]] - h[idx[b]]) < tol:
                    violations += 1
                    x0 = 0.5 * (h[idx[a]] + h[idx[b]])
                    near_a = members[idx[a]] & (np.abs(x - x0) <= tol)
                    near_b = members[idx[b]] & (np.abs(x - x0) <= tol)
                    if near_a.sum() >= 5 and near_b.sum() >= 5:
                        ks = ks_two_sample(ds.y[near_a], ds.y[near_b])
                        flagged.append((float(v), int(idx[a]), int(idx[b]), ks))
    mono = float(np.mean(list(pf.monotonicity_report.values()))) if pf.monotonicity_report else 0.0
    return Condition1Report(
        v_grid=np.asarray(v_grid, dtype=float),
        coverage=coverage,
        injectivity_violations=violations,
        flagged_pairs=tuple(flagged),
        monotonicity_violations=mono,
    )


def quantile_roundtrip_check(ds: Dataset, max_cells: int = 50, bins: int = 10) -> int:
    """Count rows where Q_{X|Z}(F_{X|Z}(X)) != X within instrument cells.

    The left-continuous inverse CDF applied to the empirical CDF reproduces
    every observed value, so the count is zero for any sample.
    """
    x = ds.x[:, 0]
    z = ds.z[:, 0]
    values = np.unique(z)
    if len(values) > max_cells:
        edges = np.quantile(z, np.linspace(0, 1, bins + 1))
        cells = np.clip(np.searchsorted(edges, z, side="right") - 1, 0, bins - 1)
    else:
        cells = np.searchsorted(values, z)
    violations = 0
    for cell in np.unique(cells):
        xc = np.sort(x[cells == cell])
        nc = len(xc)
        f = np.searchsorted(xc, x[cells == cell], side="right") / nc
        # left-continuous inverse CDF: first index with (k+1)/nc >= f, compared
        # against the same float quotients so the round-trip is exact
        k = np.searchsorted(np.arange(1, nc + 1) / nc, f, side="left")
        q = xc[np.clip(k, 0, nc - 1)]
        violations += int(np.sum(q != x[cells == cell]))
    return violations


def outcome_rank_uniformity(
    cf: ControlFunctionFit,
    rng: np.random.Generator,
    sample: int = 500,
) -> float:
    """KS distance to U[0, 1] of the estimated conditional outcome ranks.

    Mass points on the discretized CDF are smoothed by drawing uniformly
    between the CDF values at the adjacent grid points.
    """
    n = len(cf.y)
    idx = np.arange(n) if n <= sample else rng.choice(n, size=sample, replace=False)
    u = []
    y_grid = cf.y_grid
    for i in idx:
        x0, p0, yi = cf.x[i], cf.v_hat[i], cf.y[i]
        if not cf.on_support(x0, p0):
            continue
        j = np.searchsorted(y_grid, yi, side="right")
        y_right = y_grid[min(j, len(y_grid) - 1)] if j < len(y_grid) else y_grid[-1]
        y_left = y_grid[j - 1] if j > 0 else y_grid[0]
        cdf = cf.cond_cdf(x0, p0, np.array([y_left, y_right]))
        lo, hi = float(cdf[0]), float(cdf[1])
        if yi <= y_grid[0]:
            lo = 0.0
        if yi >= y_grid[-1]:
            hi = 1.0
        u.append(rng.uniform(min(lo, hi), max(lo, hi)) if hi > lo else lo)
    return ks_distance_uniform(np.asarray(u))


def residualize(ds: Dataset, controls: np.ndarray) -> Dataset:
    """Partial a linear control block out of y, x and z (with intercept)."""
    c = np.asarray(controls, dtype=float)
    if c.ndim == 1:
        c = c[:, None]
    d = np.column_stack([np.ones(ds.n), c])
    def _resid(col):
        b, *_ = np.linalg.lstsq(d, col, rcond=None)
        return col - d @ b
    y = _resid(ds.y)
    x = np.column_stack([_resid(ds.x[:, j]) for j in range(ds.k_x)])
    z = np.column_stack([_resid(ds.z[:, j]) for j in range(ds.k_z)])
    return Dataset(y=y, x=x, z=z, column_names=ds.column_names)
