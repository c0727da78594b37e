"""Synthetic experiments: regular, measurement-error, and nonlinear settings.

Every dataset draws from its own seeded streams derived from
``(seed, dataset_index, purpose, ...)``, so results do not depend on worker
scheduling or on how many datasets are requested.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from typing import Sequence

import numpy as np

from .features import ModuleId, build_train_design, enumerate_modules
from .predict import pooled_ols, predict_gimp, predict_linear, score
from .scm import (
    DataBundle,
    EnvParams,
    MeasurementErrorSpec,
    NonlinearitySpec,
    ScmModel,
    derive_rng,
    perturb_environments,
    population_moments,
    random_model,
    sample_environment,
)
from .solver import GimpModel, PartialLassoProblem, cross_validate, solve_partial_lasso
from .taxonomy import classify_all, diagnostic_scatter

__all__ = [
    "ConfigError",
    "ExperimentFailure",
    "ExperimentConfig",
    "MetricsReport",
    "Dataset",
    "make_dataset",
    "fit_dataset",
    "run_experiment",
    "run_diagnostic",
    "emit_report",
    "designed_model",
    "summarize",
]

log = logging.getLogger(__name__)

EXPERIMENTS = ("regular", "measurement_error", "nonlinear")
FAILURE_LIMIT = 0.10

# stream purposes under (seed, dataset)
_MODEL, _ENVS, _TRAIN, _TEST, _FOLDS = range(5)


class ConfigError(ValueError):
    pass


class ExperimentFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "regular"
    d: int = 9
    n_per_env: int = 300
    n_train_envs: int = 5
    n_test_envs: int = 5
    n_datasets: int = 50
    a_train: float = 2.0
    a_test: float = 10.0
    sigma2: float = 2.5
    b_exponent: float = 0.5
    grid_size: int = 30
    epsilon_ratio: float = 1e-3
    folds: int = 5
    seed: int = 0
    max_r: int | None = None
    intercept: bool = True
    refit_folds: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        for name in ("d", "n_per_env", "n_train_envs", "n_test_envs", "n_datasets", "folds", "grid_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d < 3:
            raise ConfigError("d must be at least 3")
        if self.folds < 2 or self.grid_size < 2:
            raise ConfigError("folds and grid_size must be at least 2")
        if self.sigma2 < 0:
            raise ConfigError("sigma2 must be nonnegative")
        if self.b_exponent <= 0:
            raise ConfigError("b_exponent must be positive")
        if self.n_per_env <= self.d + 1:
            raise ConfigError(f"n_per_env={self.n_per_env} is too small for d={self.d}")
        if self.max_r is None and self.d > 10:
            raise ConfigError("max_r is required when d > 10")

    @property
    def nonlinearity(self) -> NonlinearitySpec:
        return NonlinearitySpec(self.b_exponent, enabled=self.experiment == "nonlinear")

    @property
    def measurement_error(self) -> MeasurementErrorSpec:
        return MeasurementErrorSpec(self.sigma2 if self.experiment == "measurement_error" else 0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**doc)


@dataclass
class Dataset:
    index: int
    model: ScmModel
    envs: list[EnvParams]
    data: DataBundle


@dataclass
class MetricsReport:
    """Per-dataset, per-method, per-test-environment mean RSS."""

    config: dict
    rows: list[tuple[int, str, str, float]] = field(default_factory=list)
    failures: list[tuple[int, str]] = field(default_factory=list)
    fits: list[tuple[int, float, int]] = field(default_factory=list)

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r[1] for r in self.rows))

    def pooled(self) -> dict[str, dict[int, float]]:
        """Mean RSS over each dataset's test environments (equal-size blocks)."""
        acc: dict[str, dict[int, list[float]]] = {}
        for ds, method, _, rss in self.rows:
            acc.setdefault(method, {}).setdefault(ds, []).append(rss)
        return {m: {ds: float(np.mean(v)) for ds, v in per.items()} for m, per in acc.items()}

    def aggregates(self) -> list[dict]:
        out = []
        for method, per in self.pooled().items():
            out.append({"scope": "pooled", "method": method, **summarize(list(per.values()))})
        by_env: dict[tuple[str, str], list[float]] = {}
        for _, method, env, rss in self.rows:
            by_env.setdefault((method, env), []).append(rss)
        for (method, env), vals in by_env.items():
            out.append({"scope": env, "method": method, **summarize(vals)})
        return out

    def median(self, method: str) -> float:
        return float(np.median(list(self.pooled()[method].values())))


def summarize(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"n": 0, "median": float("nan"), "q25": float("nan"), "q75": float("nan"),
                "iqr": float("nan"), "variance": float("nan"), "mean": float("nan")}
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    return {
        "n": int(v.size),
        "median": float(med),
        "q25": float(q25),
        "q75": float(q75),
        "iqr": float(q75 - q25),
        "variance": float(v.var(ddof=1)) if v.size > 1 else 0.0,
        "mean": float(v.mean()),
    }


@lru_cache(maxsize=8)
def _modules(d: int, max_r: int | None) -> tuple[ModuleId, ...]:
    return tuple(enumerate_modules(d, max_r))


def designed_model() -> tuple[ScmModel, tuple[int, ...]]:
    """Four-predictor model with one varying parent and two children of Y.

    X1 -> Y <- X2, Y -> X3 -> X4, X2 -> X4; only the X1 coefficient varies.
    """
    b = np.zeros((4, 4))
    b[3, 2] = 0.8
    b[3, 1] = 0.6
    gamma = np.array([0.0, 0.0, 1.0, 0.0])
    beta = np.array([1.0, -0.7, 0.0, 0.0])
    return ScmModel(b, gamma, beta), (0,)


def make_dataset(
    cfg: ExperimentConfig, index: int, model: ScmModel | None = None, pe_set: Sequence[int] | None = None
) -> Dataset:
    if model is None:
        model = random_model(derive_rng(cfg.seed, index, _MODEL), cfg.d)
    model, envs = perturb_environments(
        model, derive_rng(cfg.seed, index, _ENVS), cfg.n_train_envs, cfg.n_test_envs, cfg.a_train, cfg.a_test, pe_set
    )
    nl, me = cfg.nonlinearity, cfg.measurement_error
    train_x, train_y, test_x, test_y = {}, {}, {}, {}
    for j, env in enumerate(envs):
        is_test = j >= cfg.n_train_envs
        purpose = _TEST if is_test else _TRAIN
        x, y = sample_environment(model, env, cfg.n_per_env, derive_rng(cfg.seed, index, purpose, j), nl, me, is_test)
        if is_test:
            test_x[env.env_id], test_y[env.env_id] = x, y
        else:
            train_x[env.env_id], train_y[env.env_id] = x, y
    return Dataset(index, model, envs, DataBundle(train_x, train_y, test_x, test_y))


def _refit_design(data: DataBundle, ids, intercept: bool, row_env: np.ndarray):
    """Per-fold module refits: coefficients from each environment's training rows."""

    def design_fn(train_mask: np.ndarray):
        x_all = np.vstack(list(data.train_x.values()))
        z_train, z_hold = [], []
        for env in data.train_x:
            rows = row_env == env
            tr, ho = rows & train_mask, rows & ~train_mask
            des = build_train_design({env: x_all[tr]}, ids, intercept)
            zt = des.z_hat
            coeffs = des.per_env_coeffs[env]
            xh = x_all[ho]
            zh = np.column_stack([xh[:, m.r0] @ c + b0 for m, (c, b0) in zip(ids, coeffs)])
            z_train.append((tr, zt))
            z_hold.append((ho, zh))
        zt_full = np.empty((int(train_mask.sum()), len(ids)))
        zh_full = np.empty((int((~train_mask).sum()), len(ids)))
        tr_pos = np.cumsum(train_mask) - 1
        ho_pos = np.cumsum(~train_mask) - 1
        for mask, block in z_train:
            zt_full[tr_pos[mask]] = block
        for mask, block in z_hold:
            zh_full[ho_pos[mask]] = block
        return zt_full, zh_full

    return design_fn


def fit_dataset(
    ds: Dataset, cfg: ExperimentConfig, lam: float | None = None
) -> tuple[GimpModel, float | None]:
    """Build the training design, pick the penalty by CV unless given, and fit."""
    ids = list(_modules(ds.model.d, cfg.max_r))
    design = build_train_design(ds.data.train_x, ids, cfg.intercept)
    x, y, _ = ds.data.pooled()
    problem = PartialLassoProblem(y, design.z_hat, x, 1.0, True, ids, design.row_env)
    if lam is None:
        design_fn = _refit_design(ds.data, ids, cfg.intercept, design.row_env) if cfg.refit_folds else None
        cv = cross_validate(
            problem,
            cfg.folds,
            grid_size=cfg.grid_size,
            epsilon_ratio=cfg.epsilon_ratio,
            rng=derive_rng(cfg.seed, ds.index, _FOLDS),
            design_fn=design_fn,
        )
        lam = cv.selected_lambda
    problem.lam = lam
    return solve_partial_lasso(problem), lam


def _oracle_predictor(ds: Dataset, env: EnvParams, cfg: ExperimentConfig):
    """Population LMMSE of the latent test response given observed predictors."""
    mean, cov = population_moments(ds.model, env)
    d = ds.model.d
    sxx = cov[:d, :d] + cfg.measurement_error.sigma2 * np.eye(d)
    coef = np.linalg.solve(sxx, cov[:d, d])
    return coef, float(mean[d] - coef @ mean[:d])


def _run_one(cfg: ExperimentConfig, index: int):
    ds = make_dataset(cfg, index)
    fit, lam = fit_dataset(ds, cfg)
    ols_coef, ols_b0 = pooled_ols(ds.data)
    rows = []
    test_envs = ds.envs[cfg.n_train_envs:]
    for env in test_envs:
        x, y = ds.data.test_x[env.env_id], ds.data.test_y[env.env_id]
        rows.append((index, "gimp", env.env_id, score(predict_gimp(fit, x, intercept=cfg.intercept), y)))
        rows.append((index, "ols", env.env_id, score(predict_linear(ols_coef, ols_b0, x), y)))
        if not cfg.nonlinearity.enabled:
            coef, b0 = _oracle_predictor(ds, env, cfg)
            rows.append((index, "oracle", env.env_id, score(predict_linear(coef, b0, x), y)))
    return rows, (index, float(lam), int(fit.active.size))


_RECOVERABLE = (np.linalg.LinAlgError, ValueError, FloatingPointError, RuntimeError)


def _guarded(args):
    cfg, index = args
    try:
        return index, _run_one(cfg, index), None
    except _RECOVERABLE as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> MetricsReport:
    """All datasets of ``cfg``; failed datasets are skipped and counted."""
    jobs = [(cfg, i) for i in range(cfg.n_datasets)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_guarded, jobs))
    else:
        results = [_guarded(j) for j in jobs]
    report = MetricsReport(cfg.to_dict())
    for index, out, err in sorted(results, key=lambda r: r[0]):
        if err is not None:
            log.warning("dataset %d failed: %s", index, err)
            report.failures.append((index, err))
            continue
        rows, fit_info = out
        report.rows.extend(rows)
        report.fits.append(fit_info)
    if len(report.failures) > FAILURE_LIMIT * cfg.n_datasets:
        raise ExperimentFailure(f"{len(report.failures)} of {cfg.n_datasets} datasets failed")
    return report


def run_diagnostic(
    cfg: ExperimentConfig,
    index: int,
    lam: float | None = None,
    model: ScmModel | None = None,
    pe_set: Sequence[int] | None = None,
    tol: float = 1e-6,
) -> list[dict]:
    """Fit one dataset and join every module's label with its ``|theta|``.

    Labels use all environments (training and test) of the dataset.
    """
    ds = make_dataset(cfg, index, model, pe_set)
    fit, _ = fit_dataset(ds, cfg, lam)
    labels = classify_all(ds.model, ds.envs, fit.module_ids, tol)
    return diagnostic_scatter(labels, fit)


def _write(path, header, rows, quoting=csv.QUOTE_MINIMAL):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, quoting=quoting, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def emit_report(report: MetricsReport, outdir) -> dict[str, str]:
    """Write per-dataset, summary, plot-data, failure and config files."""
    os.makedirs(outdir, exist_ok=True)
    paths = {
        name: os.path.join(outdir, f"{name}.csv")
        for name in ("per_dataset", "summary", "plot_data", "failures", "fits")
    }
    _write(paths["per_dataset"], ["dataset", "method", "test_env", "mean_rss"],
           [[ds, m, env, _fmt(rss)] for ds, m, env, rss in report.rows])
    keys = ["n", "median", "q25", "q75", "iqr", "variance", "mean"]
    _write(paths["summary"], ["scope", "method", *keys],
           [[a["scope"], a["method"], *(_fmt(a[k]) for k in keys)] for a in report.aggregates()])
    plot_rows = [[m, ds, float(v)] for m, per in report.pooled().items() for ds, v in per.items()]
    _write(paths["plot_data"], ["method", "dataset", "pooled test RSS"], plot_rows, csv.QUOTE_NONNUMERIC)
    _write(paths["failures"], ["dataset", "error"], report.failures)
    _write(paths["fits"], ["dataset", "lambda", "n_active"], [[i, _fmt(lam), k] for i, lam, k in report.fits])
    paths["config"] = os.path.join(outdir, "config.json")
    with open(paths["config"], "w") as fh:
        json.dump(report.config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def read_per_dataset(path) -> list[tuple[int, str, str, float]]:
    with open(path, newline="") as fh:
        return [(int(r["dataset"]), r["method"], r["test_env"], float(r["mean_rss"])) for r in csv.DictReader(fh)]
