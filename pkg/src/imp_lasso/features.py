"""Prediction modules: per-environment OLS fits of ``X_k`` on ``X_R``.

A module ``(k, R)`` is identified with 1-based predictor labels, e.g.
``ModuleId(2, (1, 3))`` regresses ``X_2`` on ``(X_1, X_3)``. Columns of the
stacked design are ordered by ``enumerate_modules``.
"""

from __future__ import annotations

import csv
import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "ModuleId",
    "ModuleDesign",
    "ModuleFit",
    "enumerate_modules",
    "fit_module_env",
    "build_train_design",
    "build_test_design",
    "write_design_csv",
]

# pivoted-QR rank cutoff, relative to the largest diagonal entry
RANK_RTOL = 1e-10
MAX_D_UNCAPPED = 10


@dataclass(frozen=True, order=True)
class ModuleId:
    k: int
    r_set: tuple[int, ...]

    def __post_init__(self):
        r = tuple(sorted(int(i) for i in self.r_set))
        if not r:
            raise ValueError("r_set must be nonempty")
        if self.k in r:
            raise ValueError(f"k={self.k} cannot be in r_set {r}")
        if self.k < 1 or r[0] < 1:
            raise ValueError("module labels are 1-based")
        object.__setattr__(self, "r_set", r)

    @property
    def k0(self) -> int:
        return self.k - 1

    @property
    def r0(self) -> list[int]:
        return [r - 1 for r in self.r_set]

    def __str__(self) -> str:
        return f"{self.k}|{','.join(map(str, self.r_set))}"

    @classmethod
    def parse(cls, text: str) -> "ModuleId":
        k, _, rest = text.strip().partition("|")
        return cls(int(k), tuple(int(r) for r in rest.split(",")))


def enumerate_modules(d: int, max_r: int | None = None) -> list[ModuleId]:
    """All ``(k, R)`` tuples: by k, then by ``|R|``, then lexicographically."""
    if d < 2:
        raise ValueError(f"need at least 2 predictors, got {d}")
    if max_r is None and d > MAX_D_UNCAPPED:
        raise ValueError(f"max_r is required when d > {MAX_D_UNCAPPED}")
    top = d - 1 if max_r is None else min(max_r, d - 1)
    ids = []
    for k in range(1, d + 1):
        rest = [j for j in range(1, d + 1) if j != k]
        for size in range(1, top + 1):
            ids.extend(ModuleId(k, r) for r in itertools.combinations(rest, size))
    return ids


@dataclass
class ModuleFit:
    coef: np.ndarray
    intercept: float
    fitted: np.ndarray
    rank_ok: bool = True


def _subset_fits(
    x: np.ndarray, r0: Sequence[int], ks: Sequence[int], intercept: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
    """OLS of several ``X_k`` on one ``X_R``; ``None`` if rank deficient.

    Returns (coefficients |R| x len(ks), intercepts, fitted n x len(ks)).
    """
    n = x.shape[0]
    design = x[:, list(r0)]
    if intercept:
        design = np.column_stack([np.ones(n), design])
    if n < design.shape[1]:
        return None
    q, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag[0] == 0 or diag[-1] <= RANK_RTOL * diag[0]:
        return None
    targets = x[:, list(ks)]
    qt = q.T @ targets
    beta = np.empty_like(qt)
    beta[piv] = scipy.linalg.solve_triangular(r, qt)
    fitted = q @ qt
    if intercept:
        return beta[1:], beta[0], fitted
    return beta, np.zeros(len(ks)), fitted


def fit_module_env(x_e: np.ndarray, mid: ModuleId, intercept: bool = True) -> ModuleFit:
    """Least squares of ``X_k`` on ``X_R`` within one environment.

    A rank-deficient design yields the environment mean of ``X_k`` as the
    fitted column and ``rank_ok=False``.
    """
    x_e = np.asarray(x_e, dtype=float)
    if x_e.shape[0] < len(mid.r_set) + 2:
        raise ValueError(f"module {mid}: {x_e.shape[0]} rows is too few for |R|={len(mid.r_set)}")
    res = _subset_fits(x_e, mid.r0, [mid.k0], intercept)
    if res is None:
        mean = float(x_e[:, mid.k0].mean())
        return ModuleFit(np.zeros(len(mid.r_set)), mean, np.full(x_e.shape[0], mean), rank_ok=False)
    beta, b0, fitted = res
    return ModuleFit(beta[:, 0], float(b0[0]), fitted[:, 0])


def _block_design(
    x: np.ndarray, ids: Sequence[ModuleId], intercept: bool
) -> tuple[np.ndarray, list[tuple[np.ndarray, float]], set[int]]:
    """Fitted module columns for one environment block, grouped by R."""
    n = x.shape[0]
    z = np.empty((n, len(ids)))
    coeffs: list[tuple[np.ndarray, float]] = [None] * len(ids)  # type: ignore[list-item]
    flagged: set[int] = set()
    by_r: dict[tuple[int, ...], list[int]] = defaultdict(list)
    for j, mid in enumerate(ids):
        by_r[mid.r_set].append(j)
    for r_set, cols in by_r.items():
        ks = [ids[j].k0 for j in cols]
        res = _subset_fits(x, [r - 1 for r in r_set], ks, intercept)
        if res is None:
            for j, k in zip(cols, ks):
                mean = float(x[:, k].mean())
                z[:, j] = mean
                coeffs[j] = (np.zeros(len(r_set)), mean)
                flagged.add(j)
            continue
        beta, b0, fitted = res
        for i, j in enumerate(cols):
            z[:, j] = fitted[:, i]
            coeffs[j] = (beta[:, i].copy(), float(b0[i]))
    return z, coeffs, flagged


@dataclass
class ModuleDesign:
    module_ids: list[ModuleId]
    z_hat: np.ndarray
    row_env: np.ndarray
    per_env_coeffs: dict[str, list[tuple[np.ndarray, float]]]
    flagged: dict[str, set[int]] = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.module_ids)


def build_train_design(
    train_x: dict[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
    ids: Sequence[ModuleId],
    intercept: bool = True,
) -> ModuleDesign:
    """Stack per-environment module fits, rows ordered by environment."""
    blocks = list(train_x.items()) if isinstance(train_x, dict) else list(train_x)
    if not blocks:
        raise ValueError("no training environments")
    ids = list(ids)
    zs, labels, per_env, flagged = [], [], {}, {}
    for env, x in blocks:
        x = np.asarray(x, dtype=float)
        n_e, d = x.shape
        if n_e <= d + 1:
            raise ValueError(f"env {env}: {n_e} rows cannot support per-environment fits with d={d}")
        z, coeffs, bad = _block_design(x, ids, intercept)
        zs.append(z)
        labels.append(np.full(n_e, env, dtype=object))
        per_env[env] = coeffs
        if bad:
            flagged[env] = bad
    return ModuleDesign(ids, np.vstack(zs), np.concatenate(labels), per_env, flagged)


def build_test_design(x_test: np.ndarray, ids: Sequence[ModuleId], intercept: bool = True) -> np.ndarray:
    """Module columns re-estimated on one unlabeled test block."""
    x_test = np.asarray(x_test, dtype=float)
    m, d = x_test.shape
    if m < d + 2:
        raise ValueError(f"test block has {m} rows; need at least d + 2 = {d + 2}")
    if not ids:
        return np.empty((m, 0))
    z, _, _ = _block_design(x_test, list(ids), intercept)
    return z


def write_design_csv(path, z: np.ndarray, ids: Sequence[ModuleId], row_env: Sequence | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = [str(m) for m in ids]
        w.writerow((["env"] if row_env is not None else []) + head)
        for i, row in enumerate(z):
            lead = [row_env[i]] if row_env is not None else []
            w.writerow(lead + [repr(float(v)) for v in row])
