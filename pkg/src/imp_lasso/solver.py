"""Partially penalized Lasso over prediction modules.

Solves::

    min_{theta, zeta}  ||Y - Z theta - X zeta||^2 + lam * ||theta||_1

where ``X`` carries a constant column and only ``theta`` is penalized.
``zeta`` is profiled out by projecting ``Y`` and ``Z`` onto the orthogonal
complement of ``span(X)``; the remaining ordinary Lasso is solved by cyclic
coordinate descent on the Gram matrix, then ``zeta`` is recovered by least
squares on ``Y - Z theta``.

No ``1/(2n)`` factor is applied, so useful penalties grow with ``n``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np
import scipy.linalg

from .features import ModuleId

__all__ = [
    "SingularDesignError",
    "ConvergenceWarning",
    "PartialLassoProblem",
    "GimpModel",
    "CvResult",
    "project_out",
    "coordinate_descent",
    "solve_partial_lasso",
    "lambda_max",
    "lambda_grid",
    "lambda_path",
    "cross_validate",
    "stratified_folds",
    "soft_threshold",
]

RANK_RTOL = 1e-10
ZERO_COLUMN_RTOL = 1e-12
KKT_RTOL = 1e-7  # tenfold margin under the 1e-6 acceptance bound


class SingularDesignError(np.linalg.LinAlgError):
    pass


class ConvergenceWarning(UserWarning):
    pass


def soft_threshold(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


@dataclass
class PartialLassoProblem:
    """``y`` (n,), penalized block ``z`` (n, p), unpenalized ``x`` (n, d).

    ``groups`` holds the environment label of each row; it is only needed
    for cross-validation.
    """

    y: np.ndarray
    z: np.ndarray
    x: np.ndarray
    lam: float = 1.0
    fit_intercept: bool = True
    module_ids: list[ModuleId] | None = None
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.y.size
        self.z = np.asarray(self.z, dtype=float).reshape(n, -1)
        self.x = np.asarray(self.x, dtype=float).reshape(n, -1)
        if self.lam < 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if self.module_ids is not None and len(self.module_ids) != self.z.shape[1]:
            raise ValueError("module_ids does not match the number of Z columns")
        if self.groups is not None:
            self.groups = np.asarray(self.groups)
            if self.groups.shape != (n,):
                raise ValueError("groups must label every row")
        if n <= self.x_aug.shape[1]:
            raise ValueError(f"n={n} rows cannot identify {self.x_aug.shape[1]} unpenalized coefficients")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.z.shape[1]

    @property
    def x_aug(self) -> np.ndarray:
        if self.fit_intercept:
            return np.column_stack([self.x, np.ones(self.n)])
        return self.x

    def subset(self, rows: np.ndarray, z: np.ndarray | None = None) -> "PartialLassoProblem":
        return PartialLassoProblem(
            self.y[rows],
            self.z[rows] if z is None else z,
            self.x[rows],
            self.lam,
            self.fit_intercept,
            self.module_ids,
            None if self.groups is None else self.groups[rows],
        )

    def column_names(self) -> list[str]:
        names = [f"X{j + 1}" for j in range(self.x.shape[1])]
        return names + (["const"] if self.fit_intercept else [])


@dataclass
class GimpModel:
    theta: np.ndarray
    zeta: np.ndarray
    intercept: float
    lambda_used: float
    module_ids: list[ModuleId] | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.theta)

    def to_dict(self) -> dict:
        ids = self.module_ids
        theta = [
            [str(ids[j]) if ids is not None else int(j), float(self.theta[j])] for j in self.active
        ]
        diag = {k: v for k, v in self.diagnostics.items() if k != "active"}
        diag["active"] = [int(j) for j in self.active]
        return {
            "p": int(self.theta.size),
            "module_ids": [str(m) for m in ids] if ids is not None else None,
            "theta": theta,
            "zeta": self.zeta.tolist(),
            "intercept": float(self.intercept),
            "lambda": float(self.lambda_used),
            "diagnostics": diag,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GimpModel":
        ids = [ModuleId.parse(s) for s in doc["module_ids"]] if doc.get("module_ids") else None
        theta = np.zeros(doc["p"])
        lookup = {str(m): j for j, m in enumerate(ids)} if ids is not None else None
        for key, val in doc["theta"]:
            theta[lookup[key] if lookup is not None else int(key)] = val
        return cls(
            theta,
            np.asarray(doc["zeta"], dtype=float),
            float(doc["intercept"]),
            float(doc["lambda"]),
            ids,
            dict(doc.get("diagnostics", {})),
        )

    def predict(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        out = np.asarray(x, dtype=float) @ self.zeta + self.intercept
        if self.theta.size:
            out = out + np.asarray(z, dtype=float) @ self.theta
        return out


@dataclass
class CvResult:
    lambda_grid: np.ndarray
    fold_errors: np.ndarray
    selected_lambda: float
    folds: np.ndarray
    n_unconverged: int = 0

    @property
    def mean_errors(self) -> np.ndarray:
        return self.fold_errors.mean(axis=0)


class _Reduction:
    """Projection of ``(Y, Z)`` off ``span(X)`` and a compressed copy of it.

    The reduced Lasso only sees ``X'`` through its column space, which is
    often far smaller than ``p`` (module columns are linear in each
    environment's predictors). ``compressed`` holds ``M = Q^T X' / scales``
    and ``b = Q^T Y'`` for an orthonormal basis ``Q`` of that space, so each
    coordinate step costs ``O(rank)`` instead of ``O(n)``.
    """

    def __init__(self, y_p: np.ndarray, x_p: np.ndarray, qr=None):
        self.y_p, self.x_p = y_p, x_p
        self.q, self.r, self.piv = qr if qr is not None else (None, None, None)
        norms = np.sqrt(np.einsum("ij,ij->j", x_p, x_p))
        keep = norms > ZERO_COLUMN_RTOL * max(norms.max(initial=0.0), 1.0)
        self.scales = np.where(keep, norms, 1.0)
        self.keep = keep
        self._compressed = None
        self._corr = None

    @classmethod
    def from_problem(cls, problem: PartialLassoProblem) -> "_Reduction":
        xa = problem.x_aug
        q, r, piv = scipy.linalg.qr(xa, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        rank = int(np.sum(diag > RANK_RTOL * diag[0])) if diag.size and diag[0] > 0 else 0
        if rank < xa.shape[1]:
            names = problem.column_names()
            bad = [names[i] for i in piv[rank:]]
            raise SingularDesignError(f"unpenalized design is rank deficient; dependent columns: {bad}")
        y_p = problem.y - q @ (q.T @ problem.y)
        x_p = problem.z - q @ (q.T @ problem.z)
        return cls(y_p, x_p, (q, r, piv))

    @property
    def compressed(self) -> tuple[np.ndarray, np.ndarray]:
        if self._compressed is None:
            basis = _column_basis(self.x_p)
            xs = np.where(self.keep, self.x_p / self.scales, 0.0)
            if basis is None:
                mt, b = xs.T, self.y_p
            else:
                mt, b = (basis.T @ xs).T, basis.T @ self.y_p
            self._compressed = (np.ascontiguousarray(mt), np.ascontiguousarray(b))
        return self._compressed

    @property
    def corr(self) -> np.ndarray:
        if self._corr is None:
            c = (self.x_p.T @ self.y_p) / self.scales
            c[~self.keep] = 0.0
            self._corr = c
        return self._corr

    def lambda_max(self) -> float:
        return 2.0 * float(np.max(np.abs(self.corr * self.scales), initial=0.0))

    def solve_theta(self, lam, warm=None, tol=1e-8, max_iter=100_000, kkt_tol=KKT_RTOL):
        return _descend(self, lam, warm, tol, max_iter, kkt_tol)

    def zeta(self, problem: PartialLassoProblem, theta: np.ndarray) -> np.ndarray:
        on = np.flatnonzero(theta)
        resid = problem.y - problem.z[:, on] @ theta[on]
        coef = np.empty(self.r.shape[1])
        coef[self.piv] = scipy.linalg.solve_triangular(self.r, self.q.T @ resid)
        return coef


SKETCH_START = 128
BASIS_RTOL = 1e-10


def _column_basis(a: np.ndarray) -> np.ndarray | None:
    """Orthonormal basis of ``range(a)``, or ``None`` when it is not smaller than ``n``.

    Uses a Gaussian sketch ``a @ omega`` with a fixed seed and accepts it only
    if ``a`` is reproduced to ``BASIS_RTOL``; otherwise widens the sketch and
    finally falls back to a pivoted QR of ``a`` itself.
    """
    n, p = a.shape
    full = min(n, p)
    total = np.linalg.norm(a)
    if total == 0:
        return np.zeros((n, 0))
    rng = np.random.default_rng(0)
    k = min(SKETCH_START, full)
    while k < full:
        sketch = a @ rng.standard_normal((p, k))
        q = _orth(sketch)
        if q.shape[1] < k and np.linalg.norm(a - q @ (q.T @ a)) <= BASIS_RTOL * total:
            return q
        k *= 2
    if p >= n:
        return None
    return _orth(a)


def _orth(a: np.ndarray) -> np.ndarray:
    q, r, _ = scipy.linalg.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > BASIS_RTOL * diag[0])) if diag.size and diag[0] > 0 else 0
    return q[:, :rank]


@numba.njit(cache=True)
def _cd_sweeps(mt, b, theta, pen, tol, max_sweeps):
    """Cyclic coordinate descent for ``||b - mt.T theta||^2 + sum pen_j |theta_j|``.

    ``theta`` is updated in place; coordinates with negative ``pen`` stay 0.
    Alternates one full sweep with sweeps over the nonzero coordinates until
    a full sweep moves nothing by ``tol``. Returns the number of sweeps.
    """
    p, r = mt.shape
    colsq = np.empty(p)
    for j in range(p):
        colsq[j] = mt[j] @ mt[j]
    res = b.copy()
    for j in range(p):
        if theta[j] != 0.0:
            res -= mt[j] * theta[j]
    sweeps = 0
    active = np.empty(p, dtype=np.int64)
    n_active = -1  # -1: next sweep visits every coordinate
    while sweeps < max_sweeps:
        change = 0.0
        count = p if n_active < 0 else n_active
        for idx in range(count):
            j = idx if n_active < 0 else active[idx]
            if pen[j] < 0.0 or colsq[j] == 0.0:
                continue
            row = mt[j]
            z = row @ res + colsq[j] * theta[j]
            new = np.sign(z) * max(abs(z) - 0.5 * pen[j], 0.0) / colsq[j]
            delta = new - theta[j]
            if delta != 0.0:
                for i in range(r):
                    res[i] -= row[i] * delta
                theta[j] = new
                step = abs(delta) * np.sqrt(colsq[j])
                if step > change:
                    change = step
        sweeps += 1
        if change < tol:
            if n_active < 0:
                break
            n_active = -1
        elif n_active < 0:
            n_active = 0
            for j in range(p):
                if theta[j] != 0.0:
                    active[n_active] = j
                    n_active += 1
    return sweeps


def _kkt_residual(red: "_Reduction", theta, lam):
    """Worst subgradient violation of the reduced Lasso, divided by ``lam``.

    Uses the exact ``X'^T Y'`` and the compressed Gram product.
    """
    if theta.size == 0:
        return 0.0
    mt, _ = red.compressed
    theta_s = theta * red.scales
    grad = 2.0 * red.scales * (red.corr - mt @ (mt.T @ theta_s))
    grad[~red.keep] = 0.0
    viol = np.where(theta == 0, np.maximum(np.abs(grad) - lam, 0.0), np.abs(grad - lam * np.sign(theta)))
    denom = lam if lam > 0 else max(float(np.linalg.norm(red.y_p)), 1.0)
    return float(viol.max(initial=0.0) / denom)


def _polish(mt, b, theta_s, pen):
    """Exact solve on the current support with its signs held fixed.

    Returns ``None`` when the support is not identifiable (more columns than
    the compressed rank, or dependent columns) or when a sign flips.
    """
    act = np.flatnonzero(theta_s)
    if act.size == 0 or act.size > mt.shape[1]:
        return None
    m_a = mt[act].T
    sign = np.sign(theta_s[act])
    rhs = m_a.T @ b - 0.5 * pen[act] * sign
    gram = m_a.T @ m_a
    try:
        c, low = scipy.linalg.cho_factor(gram)
    except np.linalg.LinAlgError:
        return None
    d = np.diag(c)
    if d.min() <= 1e-7 * d.max():
        return None
    sol = scipy.linalg.cho_solve((c, low), rhs)
    if np.any(np.sign(sol) != sign):
        return None
    out = np.zeros_like(theta_s)
    out[act] = sol
    return out


def _descend(red: _Reduction, lam, warm, tol, max_iter, kkt_tol=KKT_RTOL):
    p = red.keep.size
    if p == 0:
        return np.zeros(0), {"sweeps": 0, "kkt_residual": 0.0, "converged": True}
    pen = np.where(red.keep, lam / red.scales, -1.0)
    theta_s = np.zeros(p) if warm is None else np.where(red.keep, np.asarray(warm, dtype=float) * red.scales, 0.0)
    scale = max(float(np.linalg.norm(red.y_p)), np.finfo(float).tiny)
    # a coarse first pass is usually enough to find the support, which the
    # polishing step then solves exactly
    step_tol = max(tol, 1e-4) * scale
    total = 0
    mt, b = red.compressed
    while True:
        sweeps = _cd_sweeps(mt, b, theta_s, pen, step_tol, max_iter - total)
        total += sweeps
        theta = theta_s / red.scales
        kkt = _kkt_residual(red, theta, lam)
        if kkt <= kkt_tol:
            return theta, {"sweeps": total, "kkt_residual": kkt, "converged": True}
        cand = _polish(mt, b, theta_s, pen)
        if cand is not None:
            kkt_c = _kkt_residual(red, cand / red.scales, lam)
            if kkt_c <= kkt_tol:
                theta_s = cand
                return cand / red.scales, {"sweeps": total, "kkt_residual": kkt_c, "converged": True}
        if total >= max_iter or step_tol < 1e-15 * scale:
            warnings.warn(
                f"coordinate descent stopped after {total} sweeps with KKT residual {kkt:.3g}",
                ConvergenceWarning,
                stacklevel=3,
            )
            return theta, {"sweeps": total, "kkt_residual": kkt, "converged": False}
        step_tol = min(step_tol, tol * scale) if step_tol > tol * scale else step_tol * 0.01


def project_out(problem: PartialLassoProblem) -> tuple[np.ndarray, np.ndarray]:
    """``((I - P) Y, (I - P) Z)`` for the projection ``P`` onto ``span(X)``."""
    red = _Reduction.from_problem(problem)
    return red.y_p, red.x_p


def coordinate_descent(
    y_p: np.ndarray,
    x_p: np.ndarray,
    lam: float,
    warm_start: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Lasso ``||y_p - x_p theta||^2 + lam ||theta||_1`` by cyclic updates.

    ``tol`` bounds the per-sweep coordinate change (in units of column norm,
    relative to ``||y_p||``); a KKT check follows and tightens ``tol`` until
    the subgradient conditions hold to ``KKT_RTOL * lam``. Zero columns get 0.
    """
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    y_p = np.asarray(y_p, dtype=float).ravel()
    red = _Reduction(y_p, np.asarray(x_p, dtype=float).reshape(y_p.size, -1))
    theta, _ = _descend(red, lam, warm_start, tol, max_iter)
    return theta


def _objective(problem: PartialLassoProblem, theta, zeta_aug, lam) -> float:
    resid = problem.y - problem.x_aug @ zeta_aug
    if theta.size:
        resid = resid - problem.z @ theta
    return float(resid @ resid + lam * np.abs(theta).sum())


def _assemble(problem, red, theta, info, lam) -> GimpModel:
    coef = red.zeta(problem, theta)
    zeta, b0 = (coef[:-1], float(coef[-1])) if problem.fit_intercept else (coef, 0.0)
    diagnostics = {
        "active": np.flatnonzero(theta).tolist(),
        "kkt_residual": info["kkt_residual"],
        "objective": _objective(problem, theta, coef, lam),
        "sweeps": info["sweeps"],
        "converged": info["converged"],
    }
    return GimpModel(theta, zeta, b0, lam, problem.module_ids, diagnostics)


def solve_partial_lasso(
    problem: PartialLassoProblem, tol: float = 1e-8, max_iter: int = 100_000, warm_start=None
) -> GimpModel:
    red = _Reduction.from_problem(problem)
    theta, info = red.solve_theta(problem.lam, warm_start, tol, max_iter)
    return _assemble(problem, red, theta, info, problem.lam)


def lambda_max(problem: PartialLassoProblem) -> float:
    """Smallest penalty at which ``theta = 0`` is optimal."""
    return _Reduction.from_problem(problem).lambda_max()


def lambda_grid(lam_max: float, grid_size: int = 30, epsilon_ratio: float = 1e-3) -> np.ndarray:
    if grid_size < 2:
        raise ValueError(f"grid_size must be at least 2, got {grid_size}")
    if not 0 < epsilon_ratio < 1:
        raise ValueError(f"epsilon_ratio must lie in (0, 1), got {epsilon_ratio}")
    if lam_max <= 0:
        return np.zeros(grid_size)
    return np.geomspace(lam_max, lam_max * epsilon_ratio, grid_size)


def _path(problem, red, grid, tol, max_iter):
    out = []
    theta = None
    for lam in grid:
        theta, info = red.solve_theta(lam, theta, tol, max_iter)
        out.append((float(lam), _assemble(problem, red, theta, info, float(lam))))
    return out


def lambda_path(
    problem: PartialLassoProblem,
    grid_size: int = 30,
    epsilon_ratio: float = 1e-3,
    tol: float = 1e-8,
    max_iter: int = 100_000,
) -> list[tuple[float, GimpModel]]:
    """Warm-started fits along a log grid from ``lambda_max`` downwards."""
    red = _Reduction.from_problem(problem)
    grid = lambda_grid(red.lambda_max(), grid_size, epsilon_ratio)
    return _path(problem, red, grid, tol, max_iter)


def stratified_folds(groups: np.ndarray, folds: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Fold index per row; every group is split evenly across folds."""
    groups = np.asarray(groups)
    out = np.empty(groups.size, dtype=int)
    for g in dict.fromkeys(groups.tolist()):
        rows = np.flatnonzero(groups == g)
        if rows.size < folds:
            raise ValueError(f"environment {g} has {rows.size} rows, fewer than {folds} folds")
        order = rows if rng is None else rng.permutation(rows)
        out[order] = np.arange(rows.size) % folds
    return out


DesignFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def cross_validate(
    problem: PartialLassoProblem,
    folds: int = 5,
    grid: Sequence[float] | None = None,
    grid_size: int = 30,
    epsilon_ratio: float = 1e-3,
    rng: np.random.Generator | None = None,
    design_fn: DesignFn | None = None,
    tol: float = 1e-6,
    max_iter: int = 100_000,
    kkt_tol: float = 1e-4,
) -> CvResult:
    """K-fold CV over a decreasing penalty grid, stratified by environment.

    By default every fold reuses the full-data module columns. ``design_fn``
    maps a boolean training mask to ``(Z_train, Z_heldout)`` for refitting
    modules per fold. Fold fits only rank penalties, so they run at looser
    tolerances than ``solve_partial_lasso``.
    """
    if folds < 2:
        raise ValueError(f"folds must be at least 2, got {folds}")
    groups = problem.groups if problem.groups is not None else np.zeros(problem.n, dtype=int)
    assign = stratified_folds(groups, folds, rng)
    if grid is None:
        grid = lambda_grid(lambda_max(problem), grid_size, epsilon_ratio)
    grid = np.sort(np.asarray(grid, dtype=float))[::-1]

    errors = np.empty((folds, grid.size))
    unconverged = 0
    for f in range(folds):
        train = assign != f
        hold = ~train
        if design_fn is None:
            sub = problem.subset(train)
            z_hold = problem.z[hold]
        else:
            z_train, z_hold = design_fn(train)
            sub = problem.subset(train, z_train)
        red = _Reduction.from_problem(sub)
        theta = None
        for i, lam in enumerate(grid):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                theta, info = red.solve_theta(lam, theta, tol, max_iter, kkt_tol)
            unconverged += not info["converged"]
            coef = red.zeta(sub, theta)
            zeta, b0 = (coef[:-1], coef[-1]) if sub.fit_intercept else (coef, 0.0)
            on = np.flatnonzero(theta)
            pred = problem.x[hold] @ zeta + b0 + z_hold[:, on] @ theta[on]
            errors[f, i] = np.mean((problem.y[hold] - pred) ** 2)

    mean = errors.mean(axis=0)
    best = np.flatnonzero(mean == mean.min())
    selected = float(grid[best].max())
    return CvResult(grid, errors, selected, assign, unconverged)
