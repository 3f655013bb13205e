"""Moment systems: the signed residual transforms implied by a model specification."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data import Dataset
from .errors import EvaluatorDomainError, IvcheckError
from .estimators import BoxCoxFit, LinearFit, boxcox_transform


class ModelForm(Enum):
    LINEAR = "linear"
    BOXCOX = "box-cox"
    USER_PARAMETRIC = "user"


class Assumption(Enum):
    EXOGENEITY = "exogeneity"
    HOMOSKEDASTICITY = "homoskedasticity"


class Conditioning(Enum):
    ON_Z = "z"
    ON_X = "x"


@dataclass(frozen=True)
class ModelSpec:
    form: ModelForm = ModelForm.LINEAR
    intercept: bool = True
    assumptions: frozenset = frozenset({Assumption.EXOGENEITY})
    conditioning: Conditioning = Conditioning.ON_Z
    evaluator: object = None  # m(x, theta) for USER_PARAMETRIC

    def __post_init__(self):
        assumptions = frozenset(self.assumptions)
        if not assumptions:
            raise IvcheckError("assumption set must be non-empty")
        # homoskedasticity is tested jointly with exogeneity
        if Assumption.HOMOSKEDASTICITY in assumptions:
            assumptions = assumptions | {Assumption.EXOGENEITY}
        object.__setattr__(self, "assumptions", assumptions)


@dataclass(frozen=True)
class MomentSystem:
    """Signed moment values W_j per row plus the scalar conditioning column.

    Moments come in +/- pairs: columns of `base` hold the unsigned transforms
    and `moments` lists (label, base_index, sign).
    """

    base: np.ndarray  # (n, n_base) unsigned moment values
    moments: tuple  # of (label, base_index, sign)
    conditioning: np.ndarray  # (n,) scalar conditioning values
    v_set_desc: str = ""

    @property
    def n_moments(self) -> int:
        return len(self.moments)

    def values(self, j: int) -> np.ndarray:
        _, b, s = self.moments[j]
        return s * self.base[:, b]


def _conditioning_column(ds: Dataset, spec: ModelSpec, coordinate: int = 0) -> np.ndarray:
    col = ds.z if spec.conditioning is Conditioning.ON_Z else ds.x
    return col[:, coordinate]


def _paired(base_cols, labels, conditioning, desc) -> MomentSystem:
    base = np.column_stack(base_cols)
    moments = []
    for b, label in enumerate(labels):
        moments.append((f"{label}+", b, 1.0))
        moments.append((f"{label}-", b, -1.0))
    return MomentSystem(
        base=base,
        moments=tuple(moments),
        conditioning=np.asarray(conditioning, dtype=float),
        v_set_desc=desc,
    )


def build_exogeneity(fit, spec: ModelSpec, ds: Dataset, coordinate: int = 0) -> MomentSystem:
    """W1 = residual, W2 = -residual, conditioned on the instrument (or regressor)."""
    resid = fit.residuals
    cond = _conditioning_column(ds, spec, coordinate)
    return _paired(
        [resid],
        ["resid"],
        cond,
        f"exogeneity pair on {spec.conditioning.value}[{coordinate}]",
    )


def build_homoskedasticity(fit: LinearFit, spec: ModelSpec, ds: Dataset, coordinate: int = 0) -> MomentSystem:
    """Adds W3 = U^2 - sigma2_hat and its negative to the exogeneity pair."""
    if Assumption.HOMOSKEDASTICITY not in spec.assumptions:
        raise IvcheckError("spec does not include the homoskedasticity assumption")
    resid = fit.residuals
    sigma2 = float(np.mean(resid**2))  # 1/n, matching the population identity
    cond = _conditioning_column(ds, spec, coordinate)
    return _paired(
        [resid, resid**2 - sigma2],
        ["resid", "var"],
        cond,
        f"exogeneity + homoskedasticity on {spec.conditioning.value}[{coordinate}]",
    )


def build_parametric_grid(spec: ModelSpec, ds: Dataset, theta, coordinate: int = 0) -> MomentSystem:
    """W1 = Y - m(X, theta) at a fixed parameter point (no estimation step)."""
    if spec.evaluator is None:
        raise IvcheckError("ModelSpec.evaluator required for the parametric grid route")
    try:
        m = np.asarray(spec.evaluator(ds.x, theta), dtype=float).ravel()
    except (IvcheckError, ValueError, FloatingPointError) as exc:
        raise EvaluatorDomainError(f"evaluator failed on the data range: {exc}") from exc
    if m.shape != ds.y.shape:
        raise EvaluatorDomainError("evaluator returned a wrong-shaped array")
    if not np.all(np.isfinite(m)):
        raise EvaluatorDomainError("evaluator produced non-finite values on data range")
    resid = ds.y - m
    cond = _conditioning_column(ds, spec, coordinate)
    return _paired([resid], ["resid"], cond, f"parametric residual at theta={theta}")


def boxcox_evaluator(x, theta):
    """m(x, (b0, b1, lam)) = b0 + b1 * x^(lam); usable with build_parametric_grid."""
    b0, b1, lam = theta
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, 0]
    return b0 + b1 * boxcox_transform(x, lam)


def build_for_spec(fit, spec: ModelSpec, ds: Dataset, coordinate: int = 0) -> MomentSystem:
    """Dispatch on the assumption set; homoskedasticity implies the 4-moment system."""
    if Assumption.HOMOSKEDASTICITY in spec.assumptions:
        if isinstance(fit, BoxCoxFit):
            raise IvcheckError("homoskedasticity moments require a linear fit")
        return build_homoskedasticity(fit, spec, ds, coordinate)
    return build_exogeneity(fit, spec, ds, coordinate)
