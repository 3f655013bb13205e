"""Data-generating processes and the replication engine for size/power studies."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

from .clrtest import TestConfig, test_model
from .data import Dataset, RngSpec
from .errors import IvcheckError
from .moments import Assumption, Conditioning, ModelForm, ModelSpec
from .overid import hansen_j, sargan

# Covariance of the structural/first-stage errors: Sigma differs between the
# size design ((1, .5; .5, 2)) and the power design ((1, .5; .5, 1)), exactly
# as printed in the source tables.
SIGMA_SIZE = np.array([[1.0, 0.5], [0.5, 2.0]])
SIGMA_POWER = np.array([[1.0, 0.5], [0.5, 1.0]])


class DgpFamily(Enum):
    LINEAR_IV_NULL = "linear-iv-null"
    LINEAR_OLS_NULL = "linear-ols-null"
    BOXCOX_IV_NULL = "boxcox-iv-null"
    BOXCOX_OLS_NULL = "boxcox-ols-null"
    LINEAR_IV_POWER = "linear-iv-power"
    LINEAR_OLS_POWER = "linear-ols-power"
    BOXCOX_POWER = "boxcox-power"
    HETERO_POWER = "hetero-power"


@dataclass(frozen=True)
class DgpSpec:
    family: DgpFamily
    n: int
    lam: float = 0.0  # Box-Cox exponent for the nonlinear families
    L: float = 0.0  # deviation scale of the power families
    sigma: float = 1.0  # peakedness of the power deviation
    rho: float = 0.0  # heteroskedasticity strength

    def __post_init__(self):
        if self.n < 50:
            raise IvcheckError("n must be at least 50")
        if self.L < 0 or self.sigma <= 0 or not 0 <= self.rho <= 1:
            raise IvcheckError("need L >= 0, sigma > 0, rho in [0, 1]")

    def label(self) -> str:
        extra = {
            DgpFamily.BOXCOX_IV_NULL: f"lam={self.lam}",
            DgpFamily.BOXCOX_OLS_NULL: f"lam={self.lam}",
            DgpFamily.LINEAR_IV_POWER: f"L={self.L},sigma={self.sigma}",
            DgpFamily.LINEAR_OLS_POWER: f"L={self.L},sigma={self.sigma}",
            DgpFamily.BOXCOX_POWER: f"L={self.L},sigma={self.sigma}",
            DgpFamily.HETERO_POWER: f"rho={self.rho}",
        }.get(self.family, "")
        return f"{self.family.value}(n={self.n}{',' + extra if extra else ''})"


def _boxcox_fwd(x, lam):
    return np.log(x) if lam == 0.0 else (x**lam - 1.0) / lam


def _truncated_clip(v):
    # symmetric truncation keeps the mean at zero
    return np.clip(v, -3.0, 3.0)


def generate(spec: DgpSpec, rng: RngSpec | np.random.Generator) -> Dataset:
    """Draw one dataset from the family; deterministic given the RNG spec."""
    gen = rng if isinstance(rng, np.random.Generator) else rng.generator()
    n = spec.n
    fam = spec.family
    if fam is DgpFamily.LINEAR_IV_NULL:
        z = gen.uniform(-3.0, 3.0, n)
        uv = gen.multivariate_normal([0.0, 0.0], SIGMA_SIZE, size=n, method="cholesky")
        x = 3.0 * z + uv[:, 1]
        y = 2.0 * x + uv[:, 0]
        return Dataset(y=y, x=x, z=z)
    if fam is DgpFamily.LINEAR_OLS_NULL:
        x = gen.uniform(-3.0, 3.0, n)
        u = gen.standard_normal(n)
        y = 2.0 * x + u
        return Dataset(y=y, x=x, z=x)
    if fam is DgpFamily.BOXCOX_IV_NULL:
        z = gen.uniform(0.0, 10.0, n)
        z[z == 0.0] = 10.0  # support is the half-open interval (0, 10]
        uv = gen.multivariate_normal([0.0, 0.0], SIGMA_SIZE, size=n, method="cholesky")
        x = 2.0 * z + np.maximum(uv[:, 1], 0.0)
        y = 2.0 * _boxcox_fwd(x, spec.lam) + uv[:, 0]
        return Dataset(y=y, x=x, z=z)
    if fam is DgpFamily.BOXCOX_OLS_NULL:
        x = gen.uniform(0.0, 10.0, n)
        x[x == 0.0] = 10.0
        u = gen.standard_normal(n)
        y = 2.0 * _boxcox_fwd(x, spec.lam) + u
        return Dataset(y=y, x=x, z=x)
    if fam is DgpFamily.LINEAR_IV_POWER:
        z = gen.uniform(-3.0, 3.0, n)
        vv = gen.multivariate_normal([0.0, 0.0], SIGMA_POWER, size=n, method="cholesky")
        u = spec.L / spec.sigma * stats.norm.pdf(z / spec.sigma) + _truncated_clip(vv[:, 0])
        x = 3.0 * z + vv[:, 1]
        y = 2.0 * x + u
        return Dataset(y=y, x=x, z=z)
    if fam is DgpFamily.LINEAR_OLS_POWER:
        x = gen.uniform(-3.0, 3.0, n)
        v = gen.standard_normal(n)
        u = spec.L / spec.sigma * stats.norm.pdf(x / spec.sigma) + _truncated_clip(v)
        y = 2.0 * x + u
        return Dataset(y=y, x=x, z=x)
    if fam is DgpFamily.BOXCOX_POWER:
        # nonlinear IV design with the power contamination on the instrument
        z = gen.uniform(0.0, 10.0, n)
        z[z == 0.0] = 10.0
        vv = gen.multivariate_normal([0.0, 0.0], SIGMA_POWER, size=n, method="cholesky")
        u = spec.L / spec.sigma * stats.norm.pdf(z / spec.sigma) + _truncated_clip(vv[:, 0])
        x = 2.0 * z + np.maximum(vv[:, 1], 0.0)
        y = 2.0 * _boxcox_fwd(x, spec.lam) + u
        return Dataset(y=y, x=x, z=z)
    if fam is DgpFamily.HETERO_POWER:
        x = gen.uniform(-3.0, 3.0, n)
        sd = np.sqrt(1.0 + spec.rho / 9.0 * x**2)
        u = gen.standard_normal(n) * sd
        y = 2.0 * x + u
        return Dataset(y=y, x=x, z=x)
    raise IvcheckError(f"unknown family {fam}")


def model_spec_for(spec: DgpSpec) -> ModelSpec:
    """The model specification each family is tested under."""
    fam = spec.family
    if fam in (DgpFamily.LINEAR_IV_NULL, DgpFamily.LINEAR_IV_POWER):
        return ModelSpec(form=ModelForm.LINEAR, conditioning=Conditioning.ON_Z)
    if fam in (DgpFamily.LINEAR_OLS_NULL, DgpFamily.LINEAR_OLS_POWER):
        return ModelSpec(form=ModelForm.LINEAR, conditioning=Conditioning.ON_X)
    if fam is DgpFamily.HETERO_POWER:
        return ModelSpec(
            form=ModelForm.LINEAR,
            conditioning=Conditioning.ON_X,
            assumptions=frozenset({Assumption.EXOGENEITY, Assumption.HOMOSKEDASTICITY}),
        )
    if fam in (DgpFamily.BOXCOX_IV_NULL, DgpFamily.BOXCOX_POWER):
        return ModelSpec(form=ModelForm.BOXCOX, conditioning=Conditioning.ON_Z)
    if fam is DgpFamily.BOXCOX_OLS_NULL:
        return ModelSpec(form=ModelForm.BOXCOX, conditioning=Conditioning.ON_X)
    raise IvcheckError(f"unknown family {fam}")


class Method(Enum):
    CMI = "cmi"
    SARGAN = "sargan"
    HANSEN_J = "hansen-j"


@dataclass(frozen=True)
class CellResult:
    dgp: str
    method: str
    alpha: float
    rejection_rate: float
    replications: int
    mc_se: float
    failures: int = 0


@dataclass(frozen=True)
class StudyResult:
    cells: tuple  # of CellResult
    runtime_seconds: float
    config: dict = field(default_factory=dict)

    def rate(self, dgp_label: str, method: str, alpha: float) -> float:
        for cell in self.cells:
            if cell.dgp == dgp_label and cell.method == method and abs(cell.alpha - alpha) < 1e-12:
                return cell.rejection_rate
        raise KeyError((dgp_label, method, alpha))

    def to_rows(self):
        return [
            {
                "dgp": c.dgp,
                "method": c.method,
                "alpha": c.alpha,
                "rejection_rate": c.rejection_rate,
                "replications": c.replications,
                "mc_se": c.mc_se,
                "failures": c.failures,
            }
            for c in self.cells
        ]


def _one_replication(args):
    spec, methods, cfg, rng, rep = args
    sub = rng.substream(rep)
    ds = generate(spec, sub)
    out = {}
    for method in methods:
        try:
            if method is Method.CMI:
                report = test_model(ds, model_spec_for(spec), cfg, sub.substream(7919))
                out[method.value] = {a: report.reject(a) for a in cfg.alpha_levels}
            elif method is Method.SARGAN:
                r = sargan(ds)
                out[method.value] = {a: r.p_value < a for a in cfg.alpha_levels}
            else:
                r = hansen_j(ds)
                out[method.value] = {a: r.p_value < a for a in cfg.alpha_levels}
        except IvcheckError:
            out[method.value] = None
    return rep, out


def run_study(
    specs,
    methods=(Method.CMI,),
    reps: int = 200,
    cfg: TestConfig = TestConfig(),
    rng: RngSpec = RngSpec(),
    jobs: int = 1,
) -> StudyResult:
    """Replicate generate -> test over every (spec, method, alpha) cell.

    Results depend only on (specs, reps, cfg, rng), never on the worker count:
    per-replication RNG substreams are derived from the replication index.
    """
    if reps < 1:
        raise IvcheckError("reps must be >= 1")
    started = time.perf_counter()
    specs = list(specs)
    methods = list(methods)
    cells = []
    for si, spec in enumerate(specs):
        spec_rng = rng.substream(1_000 + si)
        tasks = [(spec, methods, cfg, spec_rng, rep) for rep in range(reps)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                raw = list(pool.map(_one_replication, tasks, chunksize=max(1, reps // (4 * jobs))))
        else:
            raw = [_one_replication(t) for t in tasks]
        raw.sort(key=lambda item: item[0])
        for method in methods:
            results = [r[1][method.value] for r in raw]
            failures = sum(r is None for r in results)
            good = [r for r in results if r is not None]
            for alpha in cfg.alpha_levels:
                k = len(good)
                rate = float(np.mean([r[alpha] for r in good])) if k else float("nan")
                se = float(np.sqrt(rate * (1.0 - rate) / k)) if k else float("nan")
                cells.append(
                    CellResult(
                        dgp=spec.label(),
                        method=method.value,
                        alpha=alpha,
                        rejection_rate=rate,
                        replications=k,
                        mc_se=se,
                        failures=failures,
                    )
                )
    return StudyResult(
        cells=tuple(cells),
        runtime_seconds=time.perf_counter() - started,
        config={
            "reps": reps,
            "seed": rng.seed,
            "stream": rng.stream,
            "alpha_levels": list(cfg.alpha_levels),
            "method": cfg.method,
            "mult_draws": cfg.mult_draws,
            "jobs": jobs,
        },
    )


def power_curve(
    family_spec: DgpSpec,
    n_list,
    methods=(Method.CMI, Method.SARGAN),
    reps: int = 100,
    cfg: TestConfig = TestConfig(),
    rng: RngSpec = RngSpec(),
    jobs: int = 1,
):
    """Rejection rate vs sample size; returns (n, method, alpha, rate, mc_se) rows."""
    n_list = list(n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise IvcheckError("n_list must be strictly increasing")
    rows = []
    for n in n_list:
        spec = DgpSpec(
            family=family_spec.family,
            n=n,
            lam=family_spec.lam,
            L=family_spec.L,
            sigma=family_spec.sigma,
            rho=family_spec.rho,
        )
        result = run_study([spec], methods, reps, cfg, rng.substream(n), jobs)
        for cell in result.cells:
            rows.append(
                {
                    "n": n,
                    "method": cell.method,
                    "alpha": cell.alpha,
                    "rate": cell.rejection_rate,
                    "mc_se": cell.mc_se,
                }
            )
    return rows
