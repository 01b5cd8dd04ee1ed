"""Linear structural causal models on a fixed DAG: fitting, ancestral
sampling under shift interventions, and closed-form post-intervention means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import _rng
from .data import Dataset
from .errors import ValidationError
from .graph import RIDGE, Dag

SAMPLE_STREAM = "scm.ancestral"


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "gaussian"
    mean: float = 0.0
    variance: float = 1.0
    residuals: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "gaussian":
            if self.variance < 0:
                raise ValidationError("noise variance must be >= 0")
        elif self.kind == "empirical":
            if self.residuals is None or len(self.residuals) == 0:
                raise ValidationError("empirical noise needs a non-empty residual sample")
            res = np.asarray(self.residuals, dtype=float)
            res.setflags(write=False)
            object.__setattr__(self, "residuals", res)
        else:
            raise ValidationError(f"unknown noise kind {self.kind!r}")

    @classmethod
    def gaussian(cls, mean: float = 0.0, variance: float = 1.0) -> "NoiseModel":
        return cls("gaussian", float(mean), float(variance))

    @classmethod
    def empirical(cls, residuals) -> "NoiseModel":
        return cls("empirical", residuals=np.asarray(residuals, dtype=float))

    @property
    def expected(self) -> float:
        return self.mean if self.kind == "gaussian" else float(self.residuals.mean())

    @property
    def var(self) -> float:
        return self.variance if self.kind == "gaussian" else float(self.residuals.var())

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.normal(self.mean, np.sqrt(self.variance), n)
        return self.residuals[rng.integers(0, self.residuals.size, n)]

    def to_dict(self) -> dict:
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mean": self.mean, "variance": self.variance}
        return {"kind": "empirical", "residuals": self.residuals.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        if d["kind"] == "gaussian":
            return cls.gaussian(d.get("mean", 0.0), d["variance"])
        return cls.empirical(d["residuals"])


@dataclass(frozen=True)
class Mechanism:
    node: int
    parents: tuple[int, ...]
    intercept: float
    coefficients: np.ndarray
    noise: NoiseModel
    form: str = "linear"

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float).reshape(-1)
        if coef.size != len(self.parents):
            raise ValidationError(f"node {self.node}: {coef.size} coefficients for {len(self.parents)} parents")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))


@dataclass(frozen=True)
class ShiftIntervention:
    """Additive offsets per node index; absent nodes are not shifted."""

    shifts: Mapping[int, float] = field(default_factory=dict)

    def vector(self, q: int) -> np.ndarray:
        a = np.zeros(q)
        for i, v in self.shifts.items():
            if not 0 <= int(i) < q:
                raise ValidationError(f"shift on invalid node index {i}")
            a[int(i)] = float(v)
        return a

    @classmethod
    def from_vector(cls, alpha, nodes: Sequence[int] | None = None) -> "ShiftIntervention":
        alpha = np.asarray(alpha, dtype=float)
        nodes = range(alpha.size) if nodes is None else nodes
        return cls({int(i): float(a) for i, a in zip(nodes, alpha) if a != 0})


@dataclass(frozen=True)
class Scm:
    dag: Dag
    mechanisms: tuple[Mechanism, ...]
    state_label: str = "source"
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        mechs = tuple(self.mechanisms)
        if len(mechs) != self.dag.q:
            raise ValidationError(f"{len(mechs)} mechanisms for {self.dag.q} nodes")
        for i, m in enumerate(mechs):
            if m.node != i:
                raise ValidationError("mechanisms must be listed in node order")
            if tuple(sorted(m.parents)) != self.dag.parent_indices[i]:
                raise ValidationError(f"mechanism parents of {self.dag.node_names[i]} differ from the DAG")
        object.__setattr__(self, "mechanisms", mechs)

    @property
    def q(self) -> int:
        return self.dag.q

    @property
    def node_names(self) -> tuple[str, ...]:
        return self.dag.node_names

    @cached_property
    def weights(self) -> np.ndarray:
        """Weighted adjacency, ``B[j, i]`` = coefficient of parent j in node i."""
        B = np.zeros((self.q, self.q))
        for m in self.mechanisms:
            for p, c in zip(m.parents, m.coefficients):
                B[p, m.node] = c
        B.setflags(write=False)
        return B

    @cached_property
    def intercepts(self) -> np.ndarray:
        c = np.array([m.intercept for m in self.mechanisms])
        c.setflags(write=False)
        return c

    @cached_property
    def noise_means(self) -> np.ndarray:
        return np.array([m.noise.expected for m in self.mechanisms])

    @property
    def is_linear(self) -> bool:
        return all(m.form == "linear" for m in self.mechanisms)

    @cached_property
    def total_effects(self) -> np.ndarray:
        T = np.linalg.solve(np.eye(self.q) - self.weights.T, np.eye(self.q))
        T.setflags(write=False)
        return T

    def model_mean(self) -> np.ndarray:
        """Observational mean implied by the linear mechanisms."""
        return self.total_effects @ (self.intercepts + self.noise_means)

    def to_dict(self) -> dict:
        names = self.node_names
        return {
            "state": self.state_label,
            "nodes": list(names),
            "edges": [
                {"parent": names[p], "child": names[m.node], "coefficient": float(c)}
                for m in self.mechanisms
                for p, c in zip(m.parents, m.coefficients)
            ],
            "intercepts": {names[m.node]: float(m.intercept) for m in self.mechanisms},
            "noise": {names[m.node]: m.noise.to_dict() for m in self.mechanisms},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Scm":
        nodes = tuple(d["nodes"])
        dag = Dag(nodes, frozenset((e["parent"], e["child"]) for e in d["edges"]))
        coef = {(e["parent"], e["child"]): e["coefficient"] for e in d["edges"]}
        mechs = []
        for i, name in enumerate(nodes):
            pa = dag.parent_indices[i]
            mechs.append(Mechanism(
                i, pa, float(d["intercepts"][name]),
                np.array([coef[(nodes[p], name)] for p in pa]),
                NoiseModel.from_dict(d["noise"][name]),
            ))
        return cls(dag, tuple(mechs), d.get("state", "source"))


def scm_from_weights(
    dag: Dag,
    weights: np.ndarray,
    intercepts=None,
    noise_variances=None,
    state_label: str = "source",
) -> Scm:
    """Gaussian linear SCM from a weighted adjacency (``B[j, i]`` for j -> i)."""
    q = dag.q
    intercepts = np.zeros(q) if intercepts is None else np.asarray(intercepts, dtype=float)
    var = np.ones(q) if noise_variances is None else np.broadcast_to(np.asarray(noise_variances, float), (q,))
    mechs = []
    for i in range(q):
        pa = dag.parent_indices[i]
        mechs.append(Mechanism(i, pa, float(intercepts[i]), weights[list(pa), i], NoiseModel.gaussian(0.0, var[i])))
    return Scm(dag, tuple(mechs), state_label)


def _ols(X: np.ndarray, y: np.ndarray, ref: np.ndarray | None = None) -> tuple[float, np.ndarray, bool]:
    """Intercept and slopes by least squares on centered columns.

    Rank-deficient designs get a ridge jitter pulling the unidentified directions
    toward ``ref`` (zero by default); returns whether the jitter was needed.
    """
    ybar = y.mean()
    if X.shape[1] == 0:
        return float(ybar), np.zeros(0), False
    xbar = X.mean(axis=0)
    Xc = X - xbar
    G = Xc.T @ Xc / X.shape[0]
    b = Xc.T @ (y - ybar) / X.shape[0]
    eig = np.linalg.eigvalsh(G)
    jitter = bool(eig[0] <= 1e-10 * max(1.0, eig[-1]))
    if jitter:
        G = G + RIDGE * np.eye(G.shape[0])
        if ref is not None:
            b = b + RIDGE * ref
    beta = np.linalg.solve(G, b)
    return float(ybar - xbar @ beta), beta, jitter


def fit_scm(
    dag: Dag,
    ds: Dataset,
    noise_kind: str = "gaussian",
    state_label: str | None = None,
    reference: Scm | None = None,
) -> Scm:
    """Least-squares mechanism per node; noise is the centered residual distribution.

    With a ``reference`` SCM on the same DAG, coefficients the data cannot
    identify (e.g. a parent held constant in this state) default to the
    reference coefficients rather than to zero, so they do not read as a
    mechanism change.
    """
    if noise_kind not in ("gaussian", "empirical"):
        raise ValidationError(f"unknown noise kind {noise_kind!r}")
    if tuple(ds.feature_names) != dag.node_names:
        ds = ds.subset(dag.node_names)
    X = ds.values
    max_pa = max((len(p) for p in dag.parent_indices), default=0)
    if ds.n <= max_pa + 1:
        raise ValidationError(f"need more than {max_pa + 1} samples, got {ds.n}")
    if reference is not None and (reference.node_names != dag.node_names or reference.dag.edges != dag.edges):
        raise ValidationError("reference SCM must share the DAG")
    mechs, warnings = [], []
    for i in range(dag.q):
        pa = dag.parent_indices[i]
        ref = None if reference is None else reference.mechanisms[i].coefficients
        intercept, beta, jitter = _ols(X[:, list(pa)], X[:, i], ref)
        if jitter:
            warnings.append(f"rank-deficient parents for {dag.node_names[i]}: ridge jitter {RIDGE}")
        resid = X[:, i] - intercept - X[:, list(pa)] @ beta
        shift = resid.mean()
        intercept += shift
        resid = resid - shift
        if noise_kind == "gaussian":
            noise = NoiseModel.gaussian(0.0, float(resid @ resid / resid.size))
        else:
            noise = NoiseModel.empirical(resid)
        mechs.append(Mechanism(i, pa, intercept, beta, noise))
    label = state_label if state_label is not None else ds.state_label
    return Scm(dag, tuple(mechs), label, tuple(warnings))


def _ancestral(
    scm: Scm,
    n: int,
    rng: np.random.Generator,
    shift: np.ndarray | None = None,
    fixed: Mapping[int, float] | None = None,
) -> np.ndarray:
    """Rows of an ancestral sample; ``fixed`` nodes are set to constants after
    their noise draw, so the stream layout does not depend on the intervention.
    """
    X = np.empty((n, scm.q))
    fixed = fixed or {}
    names = scm.node_names
    for i in scm.dag.order:
        m = scm.mechanisms[i]
        noise = m.noise.draw(rng, n)
        if i in fixed:
            X[:, i] = fixed[i]
            continue
        col = m.intercept + noise
        # sum parent terms in name order so node declaration order cannot change the rounding
        for k in sorted(range(len(m.parents)), key=lambda k: names[m.parents[k]]):
            col = col + m.coefficients[k] * X[:, m.parents[k]]
        if shift is not None and shift[i] != 0:
            col = col + shift[i]
        X[:, i] = col
    return X


def sample(scm: Scm, n: int, seed: int = 0) -> Dataset:
    if n < 1:
        raise ValidationError("n must be >= 1")
    X = _ancestral(scm, n, _rng.stream(seed, SAMPLE_STREAM))
    return Dataset(scm.state_label, scm.node_names, X)


def sample_shift(scm: Scm, iv: ShiftIntervention, n: int, seed: int = 0) -> Dataset:
    """Ancestral sample with each node's offset added before its children are drawn."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    X = _ancestral(scm, n, _rng.stream(seed, SAMPLE_STREAM), shift=iv.vector(scm.q))
    return Dataset(scm.state_label, scm.node_names, X)


def total_effect_matrix(scm: Scm) -> np.ndarray:
    """``T = (I - B^T)^-1``; column j is the mean response to a unit shift on j."""
    return np.array(scm.total_effects)


class MeanEstimate(NamedTuple):
    mean: np.ndarray
    stderr: np.ndarray
    method: str


def post_intervention_mean(
    scm: Scm,
    iv: ShiftIntervention,
    mc_n: int = 20_000,
    seed: int = 0,
    method: str = "auto",
) -> MeanEstimate:
    """Node means under a shift intervention.

    ``auto`` takes the closed form when every mechanism is linear with zero-mean
    noise and falls back to Monte Carlo otherwise.
    """
    alpha = iv.vector(scm.q)
    if method == "auto":
        exact_ok = scm.is_linear and np.all(np.abs(scm.noise_means) < 1e-12)
        method = "exact" if exact_ok else "mc"
    if method == "exact":
        mean = scm.total_effects @ (scm.intercepts + scm.noise_means + alpha)
        return MeanEstimate(mean, np.zeros(scm.q), "exact")
    if method != "mc":
        raise ValidationError(f"unknown method {method!r}")
    X = sample_shift(scm, iv, mc_n, seed).values
    return MeanEstimate(X.mean(axis=0), X.std(axis=0, ddof=1) / np.sqrt(mc_n), "mc")
