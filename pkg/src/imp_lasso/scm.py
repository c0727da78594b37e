"""Linear SCMs with an intervened response.

Variables are indexed ``0..d-1`` for the predictors and ``d`` for the
response. The joint coefficient matrix ``A`` has one row per node::

    node_i = A[i, :] @ nodes + noise_i

so the predictor rows hold ``[B | gamma]`` and the response row holds
``[beta + alpha | 0]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "ModelError",
    "ScmModel",
    "EnvParams",
    "DataBundle",
    "NonlinearitySpec",
    "MeasurementErrorSpec",
    "sample_environment",
    "population_moments",
    "random_model",
    "perturb_environments",
    "derive_rng",
    "signed_power",
]

COEF_LOW, COEF_HIGH = 0.5, 1.5
MAX_GRAPH_ATTEMPTS = 1000


class ModelError(ValueError):
    """Invalid structural model or environment."""


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *key)``.

    Streams for different keys never overlap, so adding environments or
    datasets does not disturb draws made for earlier keys.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def _topological_order(adj: np.ndarray) -> list[int] | None:
    # adj[i, j] != 0 means j -> i
    n = adj.shape[0]
    indeg = (adj != 0).sum(axis=1)
    ready = sorted(i for i in range(n) if indeg[i] == 0)
    order = []
    indeg = indeg.copy()
    while ready:
        j = ready.pop(0)
        order.append(j)
        for i in np.flatnonzero(adj[:, j]):
            indeg[i] -= 1
            if indeg[i] == 0:
                ready.append(int(i))
        ready.sort()
    return order if len(order) == n else None


@dataclass(frozen=True)
class ScmModel:
    b_matrix: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    pe_set: tuple[int, ...] = ()
    noise_mean: np.ndarray | None = None
    noise_var: np.ndarray | None = None
    topo_order: tuple[int, ...] = field(default=())

    def __post_init__(self):
        b = np.array(self.b_matrix, dtype=float)
        d = b.shape[0]
        if b.shape != (d, d):
            raise ModelError(f"b_matrix must be square, got {b.shape}")
        gamma = np.array(self.gamma, dtype=float).reshape(d)
        beta = np.array(self.beta, dtype=float).reshape(d)
        mean = np.zeros(d + 1) if self.noise_mean is None else np.array(self.noise_mean, dtype=float).reshape(d + 1)
        var = np.ones(d + 1) if self.noise_var is None else np.array(self.noise_var, dtype=float).reshape(d + 1)
        if np.any(var < 0):
            raise ModelError("noise variances must be nonnegative")
        both = np.flatnonzero((gamma != 0) & (beta != 0))
        if both.size:
            raise ModelError(f"X{both.tolist()} would be both parent and child of Y")
        for arr in (b, gamma, beta, mean, var):
            arr.setflags(write=False)
        object.__setattr__(self, "b_matrix", b)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "noise_mean", mean)
        object.__setattr__(self, "noise_var", var)

        order = _topological_order(self.joint_matrix())
        if order is None:
            raise ModelError("graph has a cycle")
        if self.topo_order:
            given = tuple(int(i) for i in self.topo_order)
            if sorted(given) != list(range(d + 1)) or not _respects_order(self.joint_matrix(), given):
                raise ModelError(f"topo_order {given} is not a topological order of the graph")
            order = list(given)
        object.__setattr__(self, "topo_order", tuple(order))

        pe = tuple(sorted(int(j) for j in self.pe_set))
        if not set(pe) <= set(self.response_parents):
            raise ModelError(f"pe_set {pe} is not a subset of PA(Y) {self.response_parents}")
        object.__setattr__(self, "pe_set", pe)

    @property
    def d(self) -> int:
        return self.b_matrix.shape[0]

    @property
    def response_parents(self) -> tuple[int, ...]:
        return tuple(int(j) for j in np.flatnonzero(self.beta))

    @property
    def response_children(self) -> tuple[int, ...]:
        return tuple(int(j) for j in np.flatnonzero(self.gamma))

    def joint_matrix(self, alpha: np.ndarray | None = None) -> np.ndarray:
        d = self.d
        a = np.zeros((d + 1, d + 1))
        a[:d, :d] = self.b_matrix
        a[:d, d] = self.gamma
        a[d, :d] = self.beta if alpha is None else self.beta + alpha
        return a

    def descendants_of_response(self) -> set[int]:
        adj = self.joint_matrix() != 0
        out: set[int] = set()
        frontier = [self.d]
        while frontier:
            j = frontier.pop()
            for i in np.flatnonzero(adj[:, j]):
                if int(i) not in out:
                    out.add(int(i))
                    frontier.append(int(i))
        return out

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "b_matrix": self.b_matrix.tolist(),
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "response_parents": list(self.response_parents),
            "pe_set": list(self.pe_set),
            "noise": {"mean": self.noise_mean.tolist(), "var": self.noise_var.tolist()},
            "topo_order": list(self.topo_order),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScmModel":
        model = cls(
            b_matrix=np.asarray(doc["b_matrix"], dtype=float),
            gamma=doc["gamma"],
            beta=doc["beta"],
            pe_set=tuple(doc.get("pe_set", ())),
            noise_mean=doc["noise"]["mean"],
            noise_var=doc["noise"]["var"],
            topo_order=tuple(doc.get("topo_order", ())),
        )
        if "d" in doc and doc["d"] != model.d:
            raise ModelError(f"d={doc['d']} does not match b_matrix of size {model.d}")
        return model


def _respects_order(a: np.ndarray, order: Sequence[int]) -> bool:
    pos = {node: i for i, node in enumerate(order)}
    rows, cols = np.nonzero(a)
    return all(pos[int(j)] < pos[int(i)] for i, j in zip(rows, cols))


@dataclass(frozen=True)
class EnvParams:
    env_id: str
    alpha: np.ndarray
    mu: float = 0.0

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).ravel()
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "env_id", str(self.env_id))

    def check(self, model: ScmModel) -> None:
        if self.alpha.shape != (model.d,):
            raise ModelError(f"env {self.env_id}: alpha has length {self.alpha.size}, expected {model.d}")
        outside = set(np.flatnonzero(self.alpha).tolist()) - set(model.pe_set)
        if outside:
            raise ModelError(f"env {self.env_id}: alpha is nonzero outside pe_set at {sorted(outside)}")

    def to_dict(self) -> dict:
        return {"env_id": self.env_id, "alpha": self.alpha.tolist(), "mu": self.mu}

    @classmethod
    def from_dict(cls, doc: dict) -> "EnvParams":
        return cls(env_id=doc["env_id"], alpha=doc["alpha"], mu=doc["mu"])


@dataclass(frozen=True)
class NonlinearitySpec:
    """Response transform ``f(x) = sign(x) |x|**b``."""

    b: float = 1.0
    enabled: bool = False

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"exponent must be positive, got {self.b}")

    @property
    def is_identity(self) -> bool:
        return not self.enabled or self.b == 1.0


@dataclass(frozen=True)
class MeasurementErrorSpec:
    sigma2: float = 0.0
    exclude_test_response: bool = True

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ValueError(f"sigma2 must be nonnegative, got {self.sigma2}")


@dataclass
class DataBundle:
    """Training blocks keyed by environment plus unlabeled test blocks.

    Test responses live in ``test_y`` and are only used for scoring.
    """

    train_x: dict[str, np.ndarray]
    train_y: dict[str, np.ndarray]
    test_x: dict[str, np.ndarray] = field(default_factory=dict)
    test_y: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.train_x) != set(self.train_y):
            raise ValueError("train_x and train_y have different environments")
        if set(self.train_x) & set(self.test_x):
            raise ValueError("environment ids must be unique across train and test")
        d = None
        for name, block in [*self.train_x.items(), *self.test_x.items()]:
            if block.ndim != 2 or block.shape[0] == 0:
                raise ValueError(f"env {name}: expected a nonempty 2-d block, got shape {block.shape}")
            if d is None:
                d = block.shape[1]
            elif block.shape[1] != d:
                raise ValueError(f"env {name}: has {block.shape[1]} columns, expected {d}")
        for name, y in [*self.train_y.items(), *self.test_y.items()]:
            x = self.train_x.get(name, self.test_x.get(name))
            if x is None or y.shape != (x.shape[0],):
                raise ValueError(f"env {name}: response does not match predictor rows")

    @property
    def d(self) -> int:
        return next(iter(self.train_x.values())).shape[1]

    def pooled(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        envs = list(self.train_x)
        x = np.vstack([self.train_x[e] for e in envs])
        y = np.concatenate([self.train_y[e] for e in envs])
        labels = np.concatenate([np.full(self.train_x[e].shape[0], e, dtype=object) for e in envs])
        return x, y, labels


def signed_power(x: np.ndarray, b: float) -> np.ndarray:
    return np.sign(x) * np.abs(x) ** b


def sample_environment(
    model: ScmModel,
    env: EnvParams,
    n: int,
    rng: np.random.Generator,
    nl: NonlinearitySpec | None = None,
    me: MeasurementErrorSpec | None = None,
    is_test: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral sampling of ``n`` rows from environment ``env``.

    The response transform wraps the full right-hand side of the response
    assignment (noise and mean shift included). Measurement error is added
    to the emitted values only; children of Y see the latent response.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    env.check(model)
    d = model.d
    a = model.joint_matrix(env.alpha)
    noise = rng.standard_normal((n, d + 1)) * np.sqrt(model.noise_var) + model.noise_mean
    noise[:, d] += env.mu
    transform = nl is not None and not nl.is_identity

    v = np.zeros((n, d + 1))
    with np.errstate(over="ignore", invalid="ignore"):  # reported below instead
        for node in model.topo_order:
            parents = np.flatnonzero(a[node])
            val = noise[:, node] + v[:, parents] @ a[node, parents]
            if node == d and transform:
                val = signed_power(val, nl.b)
            v[:, node] = val

        if me is not None and me.sigma2 > 0:
            err = rng.standard_normal((n, d + 1)) * np.sqrt(me.sigma2)
            if is_test and me.exclude_test_response:
                err[:, d] = 0.0
            v = v + err
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"env {env.env_id}: non-finite sample")
    return v[:, :d], v[:, d]


def population_moments(
    model: ScmModel, env: EnvParams, nl: NonlinearitySpec | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of ``(X_1, ..., X_d, Y)`` in ``env``."""
    if nl is not None and not nl.is_identity:
        raise ValueError("population moments are only available for the linear model")
    env.check(model)
    d = model.d
    a = model.joint_matrix(env.alpha)
    shift = model.noise_mean.copy()
    shift[d] += env.mu
    inv = np.linalg.inv(np.eye(d + 1) - a)
    mean = inv @ shift
    cov = inv @ np.diag(model.noise_var) @ inv.T
    return mean, cov


def random_model(rng: np.random.Generator, d: int) -> ScmModel:
    """Random DAG over ``d + 1`` nodes with one node picked as the response.

    The response is drawn among nodes with at least one parent and one
    child; the adjacency is redrawn when no node qualifies.
    """
    if d < 3:
        raise ValueError(f"d must be at least 3, got {d}")
    n_nodes = d + 1
    for _ in range(MAX_GRAPH_ATTEMPTS):
        adj = np.tril(rng.random((n_nodes, n_nodes)) < 0.5, k=-1)
        has_parent = adj.any(axis=1)
        has_child = adj.any(axis=0)
        candidates = np.flatnonzero(has_parent & has_child)
        if candidates.size:
            break
    else:
        raise RuntimeError(f"no node with both a parent and a child after {MAX_GRAPH_ATTEMPTS} graphs")

    mags = rng.uniform(COEF_LOW, COEF_HIGH, size=(n_nodes, n_nodes))
    signs = rng.choice([-1.0, 1.0], size=(n_nodes, n_nodes))
    w = np.where(adj, mags * signs, 0.0)
    resp = int(rng.choice(candidates))

    # relabel: predictors keep their relative order, response moves to slot d
    xs = [i for i in range(n_nodes) if i != resp]
    perm = xs + [resp]
    wp = w[np.ix_(perm, perm)]
    pos = {node: i for i, node in enumerate(perm)}
    return ScmModel(
        b_matrix=wp[:d, :d],
        gamma=wp[:d, d],
        beta=wp[d, :d],
        topo_order=tuple(pos[i] for i in range(n_nodes)),
    )


def perturb_environments(
    model: ScmModel,
    rng: np.random.Generator,
    n_train: int,
    n_test: int,
    a_train: float,
    a_test: float,
    pe_set: Sequence[int] | None = None,
) -> tuple[ScmModel, list[EnvParams]]:
    """Draw the varying-parent set and per-environment ``(alpha, mu)``.

    Returns the model with ``pe_set`` filled in, and ``n_train`` training
    environments followed by ``n_test`` test environments. Passing
    ``pe_set`` fixes the varying parents instead of drawing them.
    """
    parents = model.response_parents
    if not parents:
        raise ModelError("response has no parents to perturb")
    if pe_set is None:
        n_p = int(rng.integers(1, len(parents) + 1))
        pe = tuple(sorted(int(j) for j in rng.choice(parents, size=n_p, replace=False)))
    else:
        pe = tuple(sorted(int(j) for j in pe_set))
        n_p = len(pe)
    model = replace(model, pe_set=pe)
    envs = []
    for i in range(n_train + n_test):
        test = i >= n_train
        a = a_test if test else a_train
        alpha = np.zeros(model.d)
        alpha[list(pe)] = rng.uniform(-a, a, size=n_p)
        mu = rng.uniform(-a, a)
        name = f"test{i - n_train + 1}" if test else f"train{i + 1}"
        envs.append(EnvParams(name, alpha, mu))
    return model, envs


def dump_model(model: ScmModel, envs: Sequence[EnvParams], path) -> None:
    doc = {"model": model.to_dict(), "environments": [e.to_dict() for e in envs]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_model(path) -> tuple[ScmModel, list[EnvParams]]:
    with open(path) as fh:
        doc = json.load(fh)
    model = ScmModel.from_dict(doc["model"])
    envs = [EnvParams.from_dict(e) for e in doc.get("environments", [])]
    for env in envs:
        env.check(model)
    return model, envs
