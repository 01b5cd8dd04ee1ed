"""Constraint-aware sparse shift-intervention design.

The smooth loss is the squared distance of the intervened source mean to the
target mean, plus ``gamma`` times the drift of the intervened target mean,
plus quadratic hinge penalties for box (C1) and relative-change (C3) limits.
A weighted L1 term is handled by an accelerated proximal-gradient solver run
along a geometric lambda grid.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from . import _rng
from .errors import ValidationError
from .scm import Scm, ShiftIntervention, post_intervention_mean, sample_shift

SUPPORT_TOL = 1e-9
PENALTY_WEIGHT = 1e3
SUBSET_CAP = 200_000
GREEDY_POOL = 30


def weights_from_attributions(u) -> np.ndarray:
    """Reciprocal attribution scores scaled so the largest weight is 1."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValidationError("attribution scores must be non-negative")
    top = u.max(initial=0.0)
    if not top > 0:
        raise ValidationError("attribution scores are all zero")
    recip = 1.0 / np.maximum(u, 1e-6 * top)
    return recip / recip.max()


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def transition_percentage(xbar_source, xbar_target, xdot) -> float:
    """Share of the squared source-target mean distance removed by ``xdot``, in percent."""
    xs = np.asarray(xbar_source, dtype=float)
    xt = np.asarray(xbar_target, dtype=float)
    xd = np.asarray(xdot, dtype=float)
    d_total = float(np.sum((xs - xt) ** 2))
    if not d_total > 0:
        raise ValidationError("source and target means coincide; transition percentage undefined")
    d_res = float(np.sum((xd - xt) ** 2))
    return (1.0 - d_res / d_total) * 100.0


@dataclass(frozen=True)
class InterventionProblem:
    scm_source: Scm
    scm_target: Scm
    candidates: tuple[int, ...]
    actionable: tuple[int, ...] | None = None
    weights: np.ndarray | None = None
    gamma: float = 0.0
    box: tuple | None = None
    rc_bound: float | None = None
    xbar_source: np.ndarray | None = None
    xbar_target: np.ndarray | None = None
    mean_method: str = "auto"
    mc_n: int = 20_000
    mc_loss_n: int = 5_000
    mc_seed: int = 0
    penalty_weight: float = PENALTY_WEIGHT
    feasibility_tol: float = 1e-3

    def __post_init__(self):
        if self.scm_source.node_names != self.scm_target.node_names or \
                self.scm_source.dag.edges != self.scm_target.dag.edges:
            raise ValidationError("source and target SCMs must share one DAG")
        q = self.scm_source.q
        cand = tuple(int(i) for i in self.candidates)
        if not cand:
            raise ValidationError("candidate set is empty")
        if len(set(cand)) != len(cand) or any(not 0 <= i < q for i in cand):
            raise ValidationError("candidates must be distinct valid node indices")
        act = cand if self.actionable is None else tuple(int(i) for i in self.actionable)
        if not set(act) <= set(cand):
            raise ValidationError("actionable set must be a subset of the candidates")
        w = np.ones(len(cand)) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (len(cand),) or np.any(w <= 0):
            raise ValidationError("weights must be positive, one per candidate")
        w = w / w.max()
        if not 0 <= self.gamma <= 1:
            raise ValidationError("gamma must lie in [0, 1]")
        if self.rc_bound is not None and self.rc_bound < 0:
            raise ValidationError("rc_bound must be >= 0")
        if self.mean_method not in ("auto", "exact", "mc"):
            raise ValidationError(f"unknown mean_method {self.mean_method!r}")
        xs = self.scm_source.model_mean() if self.xbar_source is None else np.asarray(self.xbar_source, float)
        xt = self.scm_target.model_mean() if self.xbar_target is None else np.asarray(self.xbar_target, float)
        box = None
        if self.box is not None:
            lo, hi = self.box
            lo = np.broadcast_to(np.asarray(-np.inf if lo is None else lo, float), (q,)).copy()
            hi = np.broadcast_to(np.asarray(np.inf if hi is None else hi, float), (q,)).copy()
            if np.any(lo > hi):
                raise ValidationError("box lower bound exceeds upper bound")
            box = (lo, hi)
        object.__setattr__(self, "candidates", cand)
        object.__setattr__(self, "actionable", act)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "xbar_source", xs)
        object.__setattr__(self, "xbar_target", xt)
        object.__setattr__(self, "box", box)

    @property
    def q(self) -> int:
        return self.scm_source.q

    @property
    def k(self) -> int:
        return len(self.candidates)

    @property
    def node_names(self) -> tuple[str, ...]:
        return self.scm_source.node_names

    @cached_property
    def active_mask(self) -> np.ndarray:
        act = set(self.actionable)
        return np.array([c in act for c in self.candidates])

    @cached_property
    def method(self) -> str:
        if self.mean_method != "auto":
            return self.mean_method
        linear = self.scm_source.is_linear and self.scm_target.is_linear
        zero_noise = all(np.all(np.abs(s.noise_means) < 1e-12) for s in (self.scm_source, self.scm_target))
        return "exact" if linear and zero_noise else "mc"

    @cached_property
    def jac_source(self) -> np.ndarray:
        return np.asarray(self.scm_source.total_effects)[:, list(self.candidates)]

    @cached_property
    def jac_target(self) -> np.ndarray:
        return np.asarray(self.scm_target.total_effects)[:, list(self.candidates)]

    def shift(self, alpha) -> ShiftIntervention:
        return ShiftIntervention.from_vector(np.asarray(alpha, float) * self.active_mask, self.candidates)

    # -- means --------------------------------------------------------------

    def _mc_delta(self, scm: Scm, alpha, n: int) -> np.ndarray:
        iv = self.shift(alpha)
        base = post_intervention_mean(scm, ShiftIntervention(), n, self.mc_seed, "mc").mean
        return post_intervention_mean(scm, iv, n, self.mc_seed, "mc").mean - base

    def means(self, alpha) -> tuple[np.ndarray, np.ndarray]:
        """Post-intervention means of the source and target SCMs."""
        a = np.asarray(alpha, float) * self.active_mask
        if self.method == "exact":
            return self.xbar_source + self.jac_source @ a, self.xbar_target + self.jac_target @ a
        return (self.xbar_source + self._mc_delta(self.scm_source, a, self.mc_loss_n),
                self.xbar_target + self._mc_delta(self.scm_target, a, self.mc_loss_n))

    def simulated_means(self, alpha, seed: int | None = None, n: int | None = None):
        """Means from full ancestral simulation, differenced against the unshifted
        run with the same random numbers and re-anchored on the empirical means.
        """
        seed = self.mc_seed if seed is None else seed
        n = self.mc_n if n is None else n
        iv = self.shift(alpha)
        out = []
        for scm, xbar in ((self.scm_source, self.xbar_source), (self.scm_target, self.xbar_target)):
            base = sample_shift(scm, ShiftIntervention(), n, seed).values.mean(axis=0)
            moved = sample_shift(scm, iv, n, seed).values.mean(axis=0)
            out.append(xbar + moved - base)
        return out[0], out[1]


# -- loss -----------------------------------------------------------------------


def _penalty(problem: InterventionProblem, x: np.ndarray, xbar: np.ndarray):
    rho = problem.penalty_weight
    value = 0.0
    grad = np.zeros_like(x)
    if problem.box is not None:
        lo, hi = problem.box
        up = np.maximum(x - hi, 0.0)
        down = np.maximum(lo - x, 0.0)
        value += rho * float(up @ up + down @ down)
        grad += 2 * rho * (up - down)
    if problem.rc_bound is not None:
        over = np.maximum(np.abs(x) - problem.rc_bound * np.abs(xbar), 0.0)
        value += rho * float(over @ over)
        grad += 2 * rho * over * np.sign(x)
    return value, grad


def violations(problem: InterventionProblem, x: np.ndarray, xbar: np.ndarray) -> dict[str, float]:
    """Worst violation per constraint (0 when satisfied or not configured)."""
    out = {"C1": 0.0, "C3": 0.0}
    if problem.box is not None:
        lo, hi = problem.box
        out["C1"] = float(max(np.max(x - hi), np.max(lo - x), 0.0))
    if problem.rc_bound is not None:
        out["C3"] = float(max(np.max(np.abs(x) - problem.rc_bound * np.abs(xbar)), 0.0))
    return out


def _loss_parts(problem: InterventionProblem, alpha):
    xs, xt = problem.means(alpha)
    align = float(np.sum((xs - problem.xbar_target) ** 2))
    stab = float(np.sum((xt - problem.xbar_target) ** 2))
    ps, gs = _penalty(problem, xs, problem.xbar_source)
    pt, gt = _penalty(problem, xt, problem.xbar_target)
    return xs, xt, align, stab, ps + pt, gs, gt


def smooth_loss(problem: InterventionProblem, alpha) -> tuple[float, np.ndarray]:
    """Value and gradient (over the candidate coordinates) of the smooth objective."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (problem.k,):
        raise ValidationError(f"alpha must have length {problem.k}")
    if np.any(alpha[~problem.active_mask] != 0):
        raise ValidationError("alpha must be zero outside the actionable set")
    xs, xt, align, stab, pen, gs, gt = _loss_parts(problem, alpha)
    value = align + problem.gamma * stab + pen
    if problem.method == "exact":
        r_s = 2 * (xs - problem.xbar_target) + gs
        r_t = 2 * problem.gamma * (xt - problem.xbar_target) + gt
        grad = problem.jac_source.T @ r_s + problem.jac_target.T @ r_t
    else:
        grad = _fd_gradient(problem, alpha)
    return value, grad * problem.active_mask


def _value_only(problem: InterventionProblem, alpha) -> float:
    _, _, align, stab, pen, _, _ = _loss_parts(problem, alpha)
    return align + problem.gamma * stab + pen


def _fd_gradient(problem: InterventionProblem, alpha: np.ndarray) -> np.ndarray:
    grad = np.zeros(problem.k)
    for i in np.flatnonzero(problem.active_mask):
        h = 1e-5 * (1 + abs(alpha[i]))
        up, dn = alpha.copy(), alpha.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (_value_only(problem, up) - _value_only(problem, dn)) / (2 * h)
    return grad


# -- lambda grid ------------------------------------------------------------------


def gradient_at_zero(problem: InterventionProblem) -> np.ndarray:
    """``2 (xbar_S - xbar_T)`` on the candidates: the origin gradient when every
    intervention Jacobian is the identity."""
    return 2.0 * (problem.xbar_source - problem.xbar_target)[list(problem.candidates)]


def loss_gradient_at_zero(problem: InterventionProblem) -> np.ndarray:
    """Gradient of the full smooth loss at the origin (model Jacobians, penalties)."""
    return smooth_loss(problem, np.zeros(problem.k))[1]


@dataclass(frozen=True)
class LambdaGrid:
    lambda_max: float
    lambda_min: float
    theta: int
    values: tuple[float, ...]
    epsilon: float
    reason: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__, values=list(self.values))


def lambda_grid(g, w, epsilon: float = 1e-3, theta: int = 30) -> LambdaGrid:
    """Geometric grid from ``max |g_i| / w_i`` down to ``epsilon`` times that."""
    g = np.asarray(g, dtype=float)
    w = np.asarray(w, dtype=float)
    if theta < 2:
        raise ValidationError("theta must be >= 2")
    if not 1e-4 <= epsilon <= 1e-3:
        raise ValidationError("epsilon must lie in [1e-4, 1e-3]")
    if not np.any(np.abs(g) > 0):
        return LambdaGrid(0.0, 0.0, theta, (), epsilon, "zero gradient at the origin: nothing to optimize")
    lam_max = float(np.max(np.abs(g) / w))
    lam_min = epsilon * lam_max
    values = tuple(lam_max * epsilon ** (t / (theta - 1)) for t in range(theta))
    return LambdaGrid(lam_max, lam_min, theta, values, epsilon)


def problem_grid(problem: InterventionProblem, epsilon: float = 1e-3, theta: int = 30,
                 rule: str = "loss") -> LambdaGrid:
    """Lambda grid for a problem.

    ``rule="loss"`` uses the exact origin gradient of the smooth loss, which makes
    the top of the grid a zero solution for any SCM; ``rule="identity"`` uses
    ``2 (xbar_S - xbar_T)``.
    """
    g = loss_gradient_at_zero(problem) if rule == "loss" else gradient_at_zero(problem)
    mask = problem.active_mask
    return lambda_grid(np.where(mask, g, 0.0), problem.weights, epsilon, theta)


# -- solver ----------------------------------------------------------------------


@dataclass
class Solution:
    lam: float
    alpha: np.ndarray
    candidates: tuple[int, ...]
    node_names: tuple[str, ...]
    transition_pct: float
    objective_value: float
    stability_term: float
    feasibility: dict
    converged: bool
    n_iter: int
    refit_transition_pct: float | None = None

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(c for c, a in zip(self.candidates, self.alpha) if abs(a) >= SUPPORT_TOL)

    @property
    def support_names(self) -> tuple[str, ...]:
        return tuple(sorted(self.node_names[i] for i in self.support))

    @property
    def feasible(self) -> bool:
        return all(v["ok"] for v in self.feasibility.values())

    def to_dict(self) -> dict:
        names = self.node_names
        return {
            "lambda": self.lam,
            "alpha": {names[c]: float(a) for c, a in zip(self.candidates, self.alpha)},
            "support": list(self.support_names),
            "transition_pct": self.transition_pct,
            "objective_value": self.objective_value,
            "stability_term": self.stability_term,
            "feasibility": self.feasibility,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "refit_transition_pct": self.refit_transition_pct,
        }


def _lipschitz(problem: InterventionProblem) -> float:
    if problem.method != "exact":
        return 1.0
    cols = problem.active_mask
    L = 2 * np.linalg.norm(problem.jac_source[:, cols], 2) ** 2
    if problem.gamma > 0:
        L += 2 * problem.gamma * np.linalg.norm(problem.jac_target[:, cols], 2) ** 2
    return max(float(L), 1e-12)


def _fista(problem: InterventionProblem, lam: float, x0: np.ndarray, max_iter: int, tol: float):
    thr = lam * problem.weights
    mask = problem.active_mask
    x = x0 * mask
    y = x.copy()
    t = 1.0
    L = _lipschitz(problem)
    for it in range(1, max_iter + 1):
        fy, gy = smooth_loss(problem, y)
        while True:
            z = soft_threshold(y - gy / L, thr / L) * mask
            d = z - y
            fz = _value_only(problem, z)
            if fz <= fy + gy @ d + 0.5 * L * (d @ d) + 1e-12 * max(1.0, abs(fy)):
                break
            L *= 2.0
        step = np.max(np.abs(z - x), initial=0.0)
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        if (y - z) @ (z - x) > 0:
            # momentum points uphill: restart
            t_next, y = 1.0, z.copy()
        else:
            y = z + ((t - 1) / t_next) * (z - x)
        t = t_next
        x = z
        if step < tol:
            return x, True, it
    return x, False, max_iter


def objective(problem: InterventionProblem, alpha, lam: float) -> float:
    return _value_only(problem, alpha) + lam * float(problem.weights @ np.abs(alpha))


def evaluate(problem: InterventionProblem, alpha, lam: float = 0.0, converged: bool = True,
             n_iter: int = 0) -> Solution:
    """Wrap an intervention vector as a Solution, simulating the SCMs for its
    transition percentage and constraint checks."""
    alpha = np.asarray(alpha, dtype=float) * problem.active_mask
    xs_sim, xt_sim = problem.simulated_means(alpha)
    tp = transition_percentage(problem.xbar_source, problem.xbar_target, xs_sim)
    feas = {}
    vs = violations(problem, xs_sim, problem.xbar_source)
    vt = violations(problem, xt_sim, problem.xbar_target)
    for key in ("C1", "C3"):
        worst = max(vs[key], vt[key])
        feas[key] = {"ok": worst <= problem.feasibility_tol, "worst_violation": worst}
    _, xt = problem.means(alpha)
    stab = float(np.sum((xt - problem.xbar_target) ** 2))
    return Solution(float(lam), alpha, problem.candidates, problem.node_names, tp,
                    objective(problem, alpha, lam), stab, feas, converged, n_iter)


def solve(problem: InterventionProblem, lam: float, warm_start=None, max_iter: int = 10_000,
          tol: float = 1e-8) -> Solution:
    """Weighted-L1 penalized minimization of the smooth loss at one lambda."""
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    x0 = np.zeros(problem.k) if warm_start is None else np.asarray(warm_start, dtype=float)
    alpha, converged, n_iter = _fista(problem, lam, x0, max_iter, tol)
    return evaluate(problem, alpha, lam, converged, n_iter)


@dataclass
class RegPath:
    solutions: list[Solution]
    grid: LambdaGrid | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "grid": None if self.grid is None else self.grid.to_dict(),
            "solutions": [s.to_dict() for s in self.solutions],
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "support_size", "transition_pct"])
        for s in self.solutions:
            w.writerow([repr(s.lam), len(s.support), repr(s.transition_pct)])
        return buf.getvalue()

    def heatmap_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if not self.solutions:
            return ""
        first = self.solutions[0]
        w.writerow(["lambda", *(first.node_names[c] for c in first.candidates)])
        for s in self.solutions:
            w.writerow([repr(s.lam), *(repr(float(a)) for a in s.alpha)])
        return buf.getvalue()


def refit(problem: InterventionProblem, support: Sequence[int], warm_start=None) -> Solution:
    """Unregularized optimum with interventions restricted to ``support``."""
    return solve(_subproblem(problem, tuple(support)), 0.0, warm_start)


def solve_path(problem: InterventionProblem, grid: LambdaGrid | Sequence[float],
               refit_support: bool = False) -> RegPath:
    """Warm-started solutions in descending lambda order.

    With ``refit_support`` each solution also records the transition percentage
    of the unregularized optimum on its support (one refit per distinct support).
    """
    values = grid.values if isinstance(grid, LambdaGrid) else tuple(grid)
    if not values:
        raise ValidationError("empty lambda grid")
    sols = []
    warm = np.zeros(problem.k)
    notes = []
    refits: dict[tuple[int, ...], float] = {(): 0.0}
    for lam in sorted(values, reverse=True):
        if sols and sols[-1].lam == lam:
            sols.append(replace(sols[-1], alpha=sols[-1].alpha.copy()))
            continue
        sol = solve(problem, lam, warm)
        if not sol.converged:
            notes.append(f"lambda={lam!r}: iteration limit reached")
        if refit_support:
            sup = sol.support
            if sup not in refits:
                pos = [problem.candidates.index(c) for c in sup]
                refits[sup] = refit(problem, sup, sol.alpha[pos]).transition_pct
            sol.refit_transition_pct = refits[sup]
        sols.append(sol)
        warm = sol.alpha
    return RegPath(sols, grid if isinstance(grid, LambdaGrid) else None, notes)


# -- persistence and ranking -----------------------------------------------------


@dataclass
class PersistenceReport:
    set_persistence: dict[frozenset, float]
    target_persistence: dict[int, float]
    node_names: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        names = self.node_names
        return {
            "set_persistence": [
                {"set": sorted(names[i] for i in s), "persistence": v}
                for s, v in sorted(self.set_persistence.items(), key=lambda kv: (-kv[1], sorted(kv[0])))
            ],
            "target_persistence": {names[i]: v for i, v in sorted(self.target_persistence.items())},
        }


def persistence(path: RegPath) -> PersistenceReport:
    """Frequency of each exact intervention set and of each target along the path."""
    if not path.solutions:
        raise ValidationError("empty path")
    n = len(path.solutions)
    sets: dict[frozenset, int] = {}
    nodes: dict[int, int] = {c: 0 for c in path.solutions[0].candidates}
    for s in path.solutions:
        sup = frozenset(s.support)
        sets[sup] = sets.get(sup, 0) + 1
        for i in sup:
            nodes[i] = nodes.get(i, 0) + 1
    return PersistenceReport(
        {k: v / n for k, v in sets.items()},
        {k: v / n for k, v in nodes.items()},
        path.solutions[0].node_names,
    )


def rank_targets(path: RegPath, u, seed: int = 0) -> list[int]:
    """All nodes ordered by path persistence, then attribution score, then a
    seeded random tie-break."""
    u = np.asarray(u, dtype=float)
    pers = persistence(path).target_persistence
    rng = _rng.stream(seed, "optimize.rank_targets")
    base = list(rng.permutation(u.size))
    return [int(i) for i in sorted(base, key=lambda i: (-pers.get(int(i), 0.0), -u[i]))]


# -- hypothesis-guided mode -------------------------------------------------------


@dataclass
class ScreeningReport:
    candidates: tuple[int, ...]
    single_scores: dict[int, float]
    single_alphas: dict[int, float]
    ranked_subsets: list[tuple[tuple[int, ...], float]] = field(default_factory=list)
    node_names: tuple[str, ...] = ()
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        names = self.node_names
        return {
            "single": [
                {"target": names[i], "alpha": self.single_alphas[i], "transition_pct": self.single_scores[i]}
                for i in self.candidates
            ],
            "ranked_subsets": [
                {"subset": [names[i] for i in s], "mean_score": m} for s, m in self.ranked_subsets
            ],
            "notes": self.notes,
        }


def screen_single_targets(problem: InterventionProblem, z: Sequence[int]) -> ScreeningReport:
    """Unregularized optimum and transition percentage of each target on its own."""
    z = tuple(int(i) for i in z)
    if not z:
        raise ValidationError("candidate set z is empty")
    scores, alphas = {}, {}
    for i in z:
        sol = solve(_subproblem(problem, (i,)), 0.0)
        scores[i] = sol.transition_pct
        alphas[i] = float(sol.alpha[0])
    return ScreeningReport(z, scores, alphas, node_names=problem.node_names)


def _subproblem(problem: InterventionProblem, subset: Sequence[int]) -> InterventionProblem:
    return replace(problem, candidates=tuple(subset), actionable=None, weights=None)


def rank_subsets(scores: dict[int, float], k: int, names: Sequence[str], cap: int = SUBSET_CAP):
    """k-subsets ordered by mean single-target score; capped enumeration."""
    pool = sorted(scores, key=lambda i: (-scores[i], names[i]))
    notes = []
    if math.comb(len(pool), k) > cap:
        size = min(GREEDY_POOL, len(pool))
        while size > k and math.comb(size, k) > cap:
            size -= 1
        notes.append(f"{math.comb(len(pool), k)} subsets exceed the cap; enumerating within the top {size} singles")
        pool = pool[:size]
    ranked = [
        (tuple(sorted(s, key=lambda i: names[i])), float(np.mean([scores[i] for i in s])))
        for s in itertools.combinations(pool, k)
    ]
    ranked.sort(key=lambda e: (-e[1], [names[i] for i in e[0]]))
    return ranked, notes


def prioritize_and_solve(problem: InterventionProblem, z: Sequence[int], k: int, top_m: int = 10,
                         screening: ScreeningReport | None = None):
    """Two-stage fixed-cardinality design. Returns ``(best_solution, screening_report)``."""
    z = tuple(int(i) for i in z)
    if k < 1 or k > len(z):
        raise ValidationError(f"cardinality k={k} must be between 1 and |z|={len(z)}")
    report = screening or screen_single_targets(problem, z)
    ranked, notes = rank_subsets(report.single_scores, k, problem.node_names)
    report.ranked_subsets = ranked
    report.notes.extend(notes)
    best = None
    for subset, _ in ranked[:max(1, top_m)]:
        sol = solve(_subproblem(problem, subset), 0.0)
        if best is None or sol.transition_pct > best.transition_pct + 1e-12:
            best = sol
    return best, report
