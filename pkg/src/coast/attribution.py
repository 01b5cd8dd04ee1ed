"""Mechanism-change attribution of a source-to-target mean shift.

Each node's mechanism is swapped from the source SCM to the target SCM in
every possible order; Shapley values of the swaps explain each shifted
variable's mean change. Accumulated absolute contributions rank candidate
intervention targets.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import _rng
from .data import StatePair
from .errors import ValidationError
from .featsel import bh_adjust, feature_pvalue
from .scm import MeanEstimate, Scm, ShiftIntervention, post_intervention_mean


@dataclass(frozen=True)
class AttributionConfig:
    exact_max_nodes: int = 12
    n_permutations: int = 200
    mc_samples_per_eval: int = 5000
    delta: float = 0.01
    fdr_level: float = 0.05
    # "auto": closed-form hybrid means for linear SCMs, Monte Carlo otherwise
    hybrid_method: str = "auto"

    def __post_init__(self):
        if self.exact_max_nodes < 0 or self.n_permutations < 1 or self.mc_samples_per_eval < 1:
            raise ValidationError("attribution counts must be positive")
        if not 0 < self.delta < 1:
            raise ValidationError("delta must be in (0, 1)")
        if not 0 < self.fdr_level < 1:
            raise ValidationError("fdr_level must be in (0, 1)")
        if self.hybrid_method not in ("auto", "exact", "mc"):
            raise ValidationError(f"unknown hybrid_method {self.hybrid_method!r}")


def significant_shift_set(pair: StatePair, cfg: AttributionConfig | None = None) -> list[int]:
    """Features whose BH-adjusted Welch p-value is below the FDR level."""
    cfg = cfg or AttributionConfig()
    s, t = pair.source.values, pair.target.values
    raw = np.array([feature_pvalue(s[:, j], t[:, j], "welch") for j in range(pair.p)])
    adj = bh_adjust(raw)
    return [j for j in range(pair.p) if adj[j] < cfg.fdr_level]


def _check_shared(scm_s: Scm, scm_t: Scm) -> None:
    if scm_s.node_names != scm_t.node_names or scm_s.dag.edges != scm_t.dag.edges:
        raise ValidationError("source and target SCMs must share one DAG")


def splice(scm_s: Scm, scm_t: Scm, gamma: Iterable[int]) -> Scm:
    """Source SCM with the mechanisms of ``gamma`` taken from the target SCM."""
    _check_shared(scm_s, scm_t)
    gamma = set(gamma)
    mechs = tuple(scm_t.mechanisms[i] if i in gamma else scm_s.mechanisms[i] for i in range(scm_s.q))
    return Scm(scm_s.dag, mechs, "hybrid")


class HybridMeans:
    """Node means of spliced linear SCMs, solved in topological coordinates."""

    def __init__(self, scm_s: Scm, scm_t: Scm):
        _check_shared(scm_s, scm_t)
        order = np.array(scm_s.dag.order)
        self.order = order
        self.q = scm_s.q
        # rows of I - B^T in topological order are lower triangular
        self.rows_s = (np.eye(self.q) - scm_s.weights.T)[np.ix_(order, order)]
        self.rows_t = (np.eye(self.q) - scm_t.weights.T)[np.ix_(order, order)]
        self.c_s = (scm_s.intercepts + scm_s.noise_means)[order]
        self.c_t = (scm_t.intercepts + scm_t.noise_means)[order]
        self.pos = np.empty(self.q, dtype=int)
        self.pos[order] = np.arange(self.q)

    def __call__(self, mask: np.ndarray) -> np.ndarray:
        """``mask`` is a boolean vector over nodes (True = target mechanism)."""
        m = np.asarray(mask, dtype=bool)[self.order]
        A = np.where(m[:, None], self.rows_t, self.rows_s)
        c = np.where(m, self.c_t, self.c_s)
        mu = solve_triangular(A, c, lower=True, unit_diagonal=True, check_finite=False)
        return mu[self.pos]


def _value_function(scm_s: Scm, scm_t: Scm, cfg: AttributionConfig, seed: int) -> tuple[Callable, str]:
    method = cfg.hybrid_method
    if method == "auto":
        method = "exact" if scm_s.is_linear and scm_t.is_linear else "mc"
    if method == "exact":
        return HybridMeans(scm_s, scm_t), "exact"
    # one common-random-numbers seed for every coalition of the game
    crn = _rng.derive_seed(seed, "attribution.crn")

    def v(mask):
        gamma = np.flatnonzero(mask)
        return post_intervention_mean(
            splice(scm_s, scm_t, gamma), ShiftIntervention(), cfg.mc_samples_per_eval, crn, "mc"
        ).mean

    return v, "mc"


def hybrid_mean(
    scm_s: Scm,
    scm_t: Scm,
    gamma: Iterable[int],
    mc_n: int = 5000,
    seed: int = 0,
    method: str = "auto",
) -> MeanEstimate:
    """Node means when the nodes in ``gamma`` follow target mechanisms."""
    hybrid = splice(scm_s, scm_t, gamma)
    return post_intervention_mean(hybrid, ShiftIntervention(), mc_n, seed, method)


def exact_shapley(value: Callable[[np.ndarray], np.ndarray], q: int) -> np.ndarray:
    """Shapley values by subset enumeration; returns ``psi[i, j]`` for output i, player j."""
    masks = np.arange(1 << q)
    bits = ((masks[:, None] >> np.arange(q)) & 1).astype(bool)
    V = np.array([value(b) for b in bits])
    sizes = bits.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(q - s - 1) / math.factorial(q) if s < q else 0.0
                       for s in range(q + 1)])
    psi = np.zeros((V.shape[1], q))
    for j in range(q):
        without = masks[~bits[:, j]]
        gain = V[without | (1 << j)] - V[without]
        psi[:, j] = weight[sizes[without]] @ gain
    return psi


def permutation_shapley(
    value: Callable[[np.ndarray], np.ndarray],
    q: int,
    n_permutations: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Monte-Carlo Shapley values from whole random orders, one evaluation per prefix."""
    empty = np.zeros(q, dtype=bool)
    v0 = value(empty)
    psi = np.zeros((v0.size, q))
    for _ in range(n_permutations):
        mask = empty.copy()
        prev = v0
        for j in rng.permutation(q):
            mask[j] = True
            cur = value(mask)
            psi[:, j] += cur - prev
            prev = cur
    return psi / n_permutations


def shapley_attributions(
    scm_s: Scm,
    scm_t: Scm,
    omega: Sequence[int],
    cfg: AttributionConfig | None = None,
    seed: int = 0,
    return_method: bool = False,
):
    """``psi[r, j]``: contribution of node j's mechanism change to the mean shift of ``omega[r]``."""
    cfg = cfg or AttributionConfig()
    value, hybrid = _value_function(scm_s, scm_t, cfg, seed)
    q = scm_s.q
    if q <= cfg.exact_max_nodes:
        psi, estimator = exact_shapley(value, q), "exact"
    else:
        rng = _rng.stream(seed, "attribution.permutations")
        psi, estimator = permutation_shapley(value, q, cfg.n_permutations, rng), "permutation"
    psi = psi[list(omega)]
    return (psi, f"{estimator}/{hybrid}") if return_method else psi


def accumulated_scores(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 2:
        raise ValidationError("psi must be a matrix")
    return np.abs(psi).sum(axis=0)


def normalize_scores(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    total = u.sum()
    if not total > 0:
        raise ValidationError("accumulated scores are all zero")
    return 100.0 * u / total


def descending_order(u, names: Sequence[str]) -> list[int]:
    return sorted(range(len(u)), key=lambda j: (-u[j], names[j]))


def adaptive_select(u, delta: float = 0.01, names: Sequence[str] | None = None) -> list[int]:
    """Prefix of the descending ranking, stopped when the next normalized score
    falls below ``delta`` times the cumulative score already selected.
    """
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValidationError("scores must be non-negative")
    pct = normalize_scores(u)
    names = names if names is not None else [f"{j:09d}" for j in range(u.size)]
    order = descending_order(u, names)
    chosen = [order[0]]
    cumulative = pct[order[0]]
    for j in order[1:]:
        if pct[j] / cumulative < delta:
            break
        chosen.append(j)
        cumulative += pct[j]
    return chosen


@dataclass
class AttributionReport:
    node_names: tuple[str, ...]
    omega: list[int]
    psi: np.ndarray
    u: np.ndarray
    normalized_u: np.ndarray
    selected_candidates: list[int]
    method: str = ""
    config: AttributionConfig | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        names = self.node_names
        return {
            "config": None if self.config is None else self.config.__dict__,
            "method": self.method,
            "omega": [names[i] for i in self.omega],
            "u": {names[j]: float(v) for j, v in enumerate(self.u)},
            "normalized_u": {names[j]: float(v) for j, v in enumerate(self.normalized_u)},
            "selected_candidates": [names[j] for j in self.selected_candidates],
            "psi": self.psi.tolist(),
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def psi_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variable", *self.node_names])
        for i, row in zip(self.omega, self.psi):
            w.writerow([self.node_names[i], *(repr(float(x)) for x in row)])
        return buf.getvalue()


def attribute(
    pair: StatePair,
    scm_s: Scm,
    scm_t: Scm,
    cfg: AttributionConfig | None = None,
    seed: int = 0,
) -> AttributionReport:
    """Shifted-variable detection, Shapley attribution, accumulation and adaptive selection."""
    cfg = cfg or AttributionConfig()
    names = scm_s.node_names
    if tuple(pair.feature_names) != names:
        raise ValidationError("state pair and SCM node names differ")
    omega = significant_shift_set(pair, cfg)
    notes = []
    if omega:
        psi, method = shapley_attributions(scm_s, scm_t, omega, cfg, seed, return_method=True)
    else:
        psi, method = np.zeros((0, scm_s.q)), "none"
        notes.append("no significantly shifted variables")
    u = accumulated_scores(psi)
    if u.sum() > 0:
        normalized = normalize_scores(u)
        selected = adaptive_select(u, cfg.delta, names)
    else:
        normalized = np.zeros_like(u)
        selected = []
        notes.append("all accumulated scores are zero; no candidates selected")
    return AttributionReport(names, omega, psi, u, normalized, selected, method, cfg, notes)
