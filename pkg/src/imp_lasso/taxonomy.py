"""Population-level labels for prediction modules.

A module is *matched* when some invariant ``(lam, eta)`` makes
``E_l[Y|X] = lam * E_l[X_k|X_R] + eta^T X + const`` hold in every
environment, *redundant* when it matches nothing but its own coefficients are
invariant, and *anti-matching* otherwise. All quantities are exact
population moments of the linear model.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .features import ModuleId
from .scm import EnvParams, ScmModel, population_moments
from .solver import GimpModel, SingularDesignError

__all__ = [
    "Label",
    "ImpCertificate",
    "ModuleLabel",
    "population_lmmse",
    "coefficient_variation",
    "certify_imp",
    "classify_module",
    "classify_all",
    "diagnostic_scatter",
    "sufficient_condition_holds",
    "write_labels_csv",
]

DEFAULT_TOL = 1e-6


class Label(str, Enum):
    MATCHED = "Matched"
    REDUNDANT = "Redundant"
    ANTI_MATCHING = "AntiMatching"


@dataclass(frozen=True)
class ImpCertificate:
    module: ModuleId
    lambda_imp: float
    eta: np.ndarray
    feasibility_residual: float
    degenerate: bool = False

    @property
    def s_set(self) -> str:
        return "all"


@dataclass(frozen=True)
class ModuleLabel:
    module: ModuleId
    label: Label
    variation: float
    residual: float


def population_lmmse(
    moments: tuple[np.ndarray, np.ndarray], target: int, given: Sequence[int]
) -> tuple[np.ndarray, float]:
    """Best affine predictor of ``target`` from ``given`` (0-based joint indices)."""
    mean, cov = moments
    given = list(given)
    if not given:
        return np.zeros(0), float(mean[target])
    sgg = cov[np.ix_(given, given)]
    sgt = cov[given, target]
    try:
        coef = np.linalg.solve(sgg, sgt)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError(f"covariance of {given} is singular") from exc
    if np.linalg.cond(sgg) > 1e12:
        raise SingularDesignError(f"covariance of {given} is numerically singular")
    return coef, float(mean[target] - coef @ mean[given])


def _env_moments(model: ScmModel, envs: Sequence[EnvParams]):
    return [population_moments(model, e) for e in envs]


def _module_vector(moments, mid: ModuleId, d: int) -> np.ndarray:
    """Module as an affine function of X: ``(coef over X_1..X_d, intercept)``."""
    coef, b0 = population_lmmse(moments, mid.k0, mid.r0)
    w = np.zeros(d + 1)
    w[mid.r0] = coef
    w[d] = b0
    return w


def _response_vector(moments, d: int) -> np.ndarray:
    coef, b0 = population_lmmse(moments, d, range(d))
    return np.append(coef, b0)


def _variation(vectors: Sequence[np.ndarray]) -> float:
    if len(vectors) < 2:
        return 0.0
    return max(float(np.max(np.abs(a - b))) for a, b in itertools.combinations(vectors, 2))


def coefficient_variation(model: ScmModel, envs: Sequence[EnvParams], mid: ModuleId, _moments=None) -> float:
    """Largest change of the module's affine coefficients between two environments."""
    if len(envs) < 2:
        raise ValueError("need at least two environments")
    moments = _moments or _env_moments(model, envs)
    d = model.d
    return _variation([_module_vector(m, mid, d) for m in moments])


def _certify(mid, c, w, tol) -> ImpCertificate:
    dc = np.array([a - b for a, b in itertools.combinations(c, 2)]).ravel()
    dw = np.array([a - b for a, b in itertools.combinations(w, 2)]).ravel()
    denom = float(dw @ dw)
    degenerate = len(c) < 2 or denom <= tol**2
    lam = 0.0 if degenerate else float(dw @ dc) / denom
    fitted = [ce - lam * we for ce, we in zip(c, w)]
    eta = np.mean(fitted, axis=0)
    resid = max(float(np.max(np.abs(f - eta))) for f in fitted)
    return ImpCertificate(mid, lam, eta, resid, degenerate)


def certify_imp(
    model: ScmModel, envs: Sequence[EnvParams], mid: ModuleId, tol: float = DEFAULT_TOL, _moments=None
) -> ImpCertificate:
    """Least-squares search for invariant ``(lam, eta)``; residual 0 means an IMP.

    ``eta`` carries ``d`` slope entries followed by the intercept.
    """
    moments = _moments or _env_moments(model, envs)
    d = model.d
    c = [_response_vector(m, d) for m in moments]
    w = [_module_vector(m, mid, d) for m in moments]
    return _certify(mid, c, w, tol)


def classify_module(
    model: ScmModel, envs: Sequence[EnvParams], mid: ModuleId, tol: float = DEFAULT_TOL, _moments=None
) -> ModuleLabel:
    moments = _moments or _env_moments(model, envs)
    cert = certify_imp(model, envs, mid, tol, moments)
    var = coefficient_variation(model, envs, mid, moments) if len(envs) > 1 else 0.0
    if cert.feasibility_residual <= tol:
        label = Label.MATCHED
    elif var <= tol:
        label = Label.REDUNDANT
    else:
        label = Label.ANTI_MATCHING
    return ModuleLabel(mid, label, var, cert.feasibility_residual)


def classify_all(
    model: ScmModel, envs: Sequence[EnvParams], ids: Sequence[ModuleId], tol: float = DEFAULT_TOL
) -> list[ModuleLabel]:
    moments = _env_moments(model, envs)
    d = model.d
    c = [_response_vector(m, d) for m in moments]
    out = []
    for mid in ids:
        w = [_module_vector(m, mid, d) for m in moments]
        cert = _certify(mid, c, w, tol)
        var = _variation(w)
        if cert.feasibility_residual <= tol:
            label = Label.MATCHED
        elif var <= tol:
            label = Label.REDUNDANT
        else:
            label = Label.ANTI_MATCHING
        out.append(ModuleLabel(mid, label, var, cert.feasibility_residual))
    return out


def sufficient_condition_holds(model: ScmModel, mid: ModuleId, variation: float, tol: float = DEFAULT_TOL) -> bool:
    """Whether the sufficient condition for an IMP covers this module."""
    pe = set(model.pe_set)
    return (
        bool(model.response_children)
        and mid.k0 not in pe
        and pe <= set(mid.r0)
        and variation > tol
    )


def diagnostic_scatter(labels: Sequence[ModuleLabel], fit: GimpModel) -> list[dict]:
    """One row per module joining its label with ``|theta_j|``."""
    if fit.module_ids is None or [str(m) for m in fit.module_ids] != [str(lab.module) for lab in labels]:
        raise ValueError("labels and fit do not share the same module ids")
    return [
        {
            "module": str(lab.module),
            "abs_theta": float(abs(fit.theta[j])),
            "label": lab.label.value,
            "variation": lab.variation,
            "residual": lab.residual,
        }
        for j, lab in enumerate(labels)
    ]


def write_labels_csv(path, labels: Sequence[ModuleLabel], fit: GimpModel | None = None) -> None:
    rows = diagnostic_scatter(labels, fit) if fit is not None else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["module", "label", "variation", "residual"] + (["abs_theta"] if rows else []))
        for j, lab in enumerate(labels):
            row = [str(lab.module), lab.label.value, repr(lab.variation), repr(lab.residual)]
            if rows:
                row.append(repr(rows[j]["abs_theta"]))
            w.writerow(row)
