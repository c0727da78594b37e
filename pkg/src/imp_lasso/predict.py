"""Test-environment predictions and the pooled OLS baseline."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .features import ModuleId, build_test_design
from .scm import DataBundle
from .solver import GimpModel, SingularDesignError

__all__ = ["Prediction", "predict_gimp", "pooled_ols", "predict_linear", "score", "write_predictions_csv"]


@dataclass
class Prediction:
    env_id: str
    y_hat: np.ndarray
    rss: float | None = None


def score(y_hat, y_true) -> float:
    """Mean squared residual."""
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    y_true = np.asarray(y_true, dtype=float).ravel()
    if y_hat.size != y_true.size:
        raise ValueError(f"length mismatch: {y_hat.size} predictions for {y_true.size} responses")
    if y_hat.size == 0:
        raise ValueError("nothing to score")
    return float(np.mean((y_true - y_hat) ** 2))


def predict_gimp(
    fit: GimpModel, x_test: np.ndarray, ids: Sequence[ModuleId] | None = None, intercept: bool = True
) -> np.ndarray:
    """Predict one test environment, re-estimating only the active modules on it."""
    ids = list(fit.module_ids if ids is None else ids)
    if len(ids) != fit.theta.size:
        raise ValueError(f"{len(ids)} module ids for {fit.theta.size} coefficients")
    if fit.module_ids is not None and [str(m) for m in ids] != [str(m) for m in fit.module_ids]:
        raise ValueError("module ids do not match the fit")
    x_test = np.asarray(x_test, dtype=float)
    active = fit.active
    z = build_test_design(x_test, [ids[j] for j in active], intercept)
    return x_test @ fit.zeta + fit.intercept + z @ fit.theta[active]


def pooled_ols(data: DataBundle | tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, float]:
    """Least squares of the pooled training response on ``[X, 1]``."""
    if isinstance(data, DataBundle):
        x, y, _ = data.pooled()
    else:
        x, y = data
    design = np.column_stack([x, np.ones(x.shape[0])])
    q, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag[0] == 0 or diag[-1] <= 1e-10 * diag[0]:
        raise SingularDesignError("pooled design [X, 1] is rank deficient")
    coef = np.empty(design.shape[1])
    coef[piv] = scipy.linalg.solve_triangular(r, q.T @ y)
    return coef[:-1], float(coef[-1])


def predict_linear(coef: np.ndarray, intercept: float, x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float) @ coef + intercept


def write_predictions_csv(path, predictions: Sequence[Prediction], truths: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env_id", "row", "y_hat"] + (["y_true"] if truths else []))
        for pred in predictions:
            y_true = truths.get(pred.env_id) if truths else None
            for i, v in enumerate(pred.y_hat):
                row = [pred.env_id, i, repr(float(v))]
                if truths:
                    row.append(repr(float(y_true[i])) if y_true is not None else "")
                w.writerow(row)
