"""Synthetic benchmark: random linear-Gaussian SCMs, surgical interventions on
hidden targets, and comparison of the causal pipeline against ranking by
marginal mean shift (MDA).
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import _rng
from ._parallel import pmap
from .attribution import AttributionConfig, attribute
from .data import SOURCE, TARGET, Dataset, StatePair, standardize
from .errors import ValidationError
from .graph import Dag, DiscoveryConfig, discover_shared_backbone
from .optimize import (
    InterventionProblem,
    RegPath,
    Solution,
    problem_grid,
    rank_targets,
    solve,
    solve_path,
    weights_from_attributions,
)
from .scm import Scm, _ancestral, fit_scm, scm_from_weights

COAST = "coast"
MDA = "mda"


@dataclass(frozen=True)
class BenchConfig:
    q: int = 10
    k_true: int = 1
    sigma: float = 1.0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_samples: int = 5000
    edge_prob: float | None = None
    coef_range: tuple[float, float] = (0.5, 2.0)
    do_value_range: tuple[float, float] = (2.0, 5.0)
    graph_mode: str = "oracle"
    theta: int = 30
    epsilon: float = 1e-3
    gamma: float = 0.0
    mc_n: int = 20_000
    # score each path support by its unregularized refit, as done for MDA's supports
    refit_support: bool = True
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)

    def __post_init__(self):
        if self.q < 1 or self.n_samples < 2 or self.sigma <= 0:
            raise ValidationError("q, n_samples and sigma must be positive")
        if not 0 <= self.k_true <= self.q:
            raise ValidationError(f"k_true must be in [0, q], got {self.k_true}")
        if self.graph_mode not in ("oracle", "learned"):
            raise ValidationError(f"graph_mode must be 'oracle' or 'learned', got {self.graph_mode!r}")
        lo, hi = self.coef_range
        if not 0 <= lo <= hi:
            raise ValidationError("coef_range must satisfy 0 <= low <= high")
        lo, hi = self.do_value_range
        if not 0 <= lo <= hi:
            raise ValidationError("do_value_range must satisfy 0 <= low <= high")
        if self.edge_prob is not None and not 0 <= self.edge_prob <= 1:
            raise ValidationError("edge_prob must lie in [0, 1]")

    @property
    def p_edge(self) -> float:
        return min(1.0, 4.0 / self.q) if self.edge_prob is None else self.edge_prob

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["edge_prob"] = self.p_edge
        return d


@dataclass(frozen=True)
class GroundTruth:
    dag: Dag
    scm: Scm
    true_targets: tuple[int, ...]
    do_values: tuple[float, ...]

    @property
    def interventions(self) -> dict[int, float]:
        return dict(zip(self.true_targets, self.do_values))


def node_names(q: int) -> tuple[str, ...]:
    width = len(str(q - 1))
    return tuple(f"x{i:0{width}d}" for i in range(q))


def generate_ground_truth(cfg: BenchConfig, seed: int) -> GroundTruth:
    """Erdos-Renyi DAG over a random order, signed uniform weights, N(0, sigma^2) noise."""
    rng = _rng.stream(seed, "bench.ground_truth")
    q = cfg.q
    names = node_names(q)
    perm = rng.permutation(q)
    W = np.zeros((q, q))
    lo, hi = cfg.coef_range
    for a in range(q):
        for b in range(a + 1, q):
            if rng.random() < cfg.p_edge:
                sign = 1.0 if rng.random() < 0.5 else -1.0
                W[perm[a], perm[b]] = sign * rng.uniform(lo, hi)
    edges = frozenset((names[i], names[j]) for i, j in zip(*np.nonzero(W)))
    dag = Dag(names, edges)
    scm = scm_from_weights(dag, W, np.zeros(q), cfg.sigma**2)
    targets = tuple(int(t) for t in sorted(rng.choice(q, size=cfg.k_true, replace=False)))
    dlo, dhi = cfg.do_value_range
    values = tuple(
        float((1.0 if rng.random() < 0.5 else -1.0) * rng.uniform(dlo, dhi) * cfg.sigma) for _ in targets
    )
    return GroundTruth(dag, scm, targets, values)


def generate_pair(gt: GroundTruth, cfg: BenchConfig, seed: int, raw: bool = False) -> StatePair:
    """Observational source; target with each true target pinned to its do-value.

    Both states are standardized with pooled statistics unless ``raw``.
    """
    names = gt.scm.node_names
    src = _ancestral(gt.scm, cfg.n_samples, _rng.stream(seed, "bench.source"))
    tgt = _ancestral(gt.scm, cfg.n_samples, _rng.stream(seed, "bench.target"), fixed=gt.interventions)
    pair = StatePair(Dataset(SOURCE, names, src), Dataset(TARGET, names, tgt))
    return pair if raw else standardize(pair)


def mda_rank(pair: StatePair) -> list[tuple[int, float]]:
    """Variables by absolute mean difference, largest first; ties by name."""
    diff = np.abs(pair.source.values.mean(axis=0) - pair.target.values.mean(axis=0))
    names = pair.feature_names
    order = sorted(range(pair.p), key=lambda j: (-diff[j], names[j]))
    return [(j, float(diff[j])) for j in order]


def recall_at_k(selected: Sequence[int], truth, k: int) -> float:
    truth = set(truth)
    if k > len(selected):
        raise ValidationError(f"k={k} exceeds the {len(selected)} ranked items")
    if k == 0:
        return 1.0
    return len(set(list(selected)[:k]) & truth) / k


def solution_score(s: Solution, refit: bool = False) -> float:
    if refit and s.refit_transition_pct is not None:
        return s.refit_transition_pct
    return s.transition_pct


def match_solution(path: RegPath, k_true: int, refit: bool = False) -> tuple[Solution, bool]:
    """Path solution whose support size equals ``k_true`` (best transition if
    several), else the nearest size with ties to the smaller; flags substitution.
    """
    if not path.solutions:
        raise ValidationError("empty path")
    sizes = sorted({len(s.support) for s in path.solutions})
    size = min(sizes, key=lambda z: (abs(z - k_true), z))
    pick = max((s for s in path.solutions if len(s.support) == size), key=lambda s: solution_score(s, refit))
    return pick, size != k_true


def tp_at_k(path: RegPath, k_true: int, refit: bool = False) -> float:
    return solution_score(match_solution(path, k_true, refit)[0], refit)


def distinct_nonzero(path: RegPath, refit: bool = False) -> list[Solution]:
    """Best solution per distinct non-empty support, in order of first appearance."""
    best: dict[frozenset, Solution] = {}
    for s in path.solutions:
        key = frozenset(s.support)
        if not key:
            continue
        if key not in best or solution_score(s, refit) > solution_score(best[key], refit):
            best[key] = s
    return list(best.values())


def avg_tp(path: RegPath, refit: bool = False) -> float:
    sols = distinct_nonzero(path, refit)
    if not sols:
        raise ValidationError("path has no non-empty solution")
    return float(np.mean([solution_score(s, refit) for s in sols]))


def _base_problem(pair: StatePair, scm_s: Scm, scm_t: Scm, candidates, weights=None,
                  mc_n: int = 20_000, mc_seed: int = 0, gamma: float = 0.0) -> InterventionProblem:
    return InterventionProblem(
        scm_s, scm_t, tuple(candidates), weights=weights, gamma=gamma,
        xbar_source=pair.source.values.mean(axis=0), xbar_target=pair.target.values.mean(axis=0),
        mc_n=mc_n, mc_seed=mc_seed,
    )


def mda_tp_matched(pair: StatePair, scm_s: Scm, scm_t: Scm, sizes: Sequence[int],
                   mc_n: int = 20_000, mc_seed: int = 0) -> dict[int, float]:
    """Transition percentage of the unregularized optimum on MDA's top variables, per size."""
    order = [j for j, _ in mda_rank(pair)]
    out = {}
    for size in sorted(set(sizes)):
        if size < 1:
            continue
        problem = _base_problem(pair, scm_s, scm_t, order[:size], mc_n=mc_n, mc_seed=mc_seed)
        out[size] = solve(problem, 0.0).transition_pct
    return out


@dataclass
class SeedResult:
    seed: int
    true_targets: list[str]
    metrics: dict[str, dict[str, float]]
    coast_ranking: list[str]
    mda_ranking: list[str]
    candidates: list[str]
    path_sizes: list[int]
    flags: list[str]
    runtime: dict[str, float]


@dataclass
class BenchResult:
    config: BenchConfig
    per_seed: list[SeedResult]

    def values(self, method: str, metric: str) -> list[float]:
        return [r.metrics[method][metric] for r in self.per_seed]

    def mean(self, method: str, metric: str) -> float:
        return float(np.mean(self.values(method, metric)))

    @property
    def aggregate(self) -> dict[str, dict[str, float]]:
        return {
            m: {k: self.mean(m, k) for k in ("recall_at_k", "tp_at_k", "avg_tp")}
            for m in (COAST, MDA)
        }

    def to_dict(self, timing: bool = True) -> dict:
        rows = [asdict(r) for r in self.per_seed]
        if not timing:
            for r in rows:
                r.pop("runtime")
        return {
            "config": self.config.to_dict(),
            "aggregate": self.aggregate,
            "per_seed": rows,
        }

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2)

    def rows(self) -> list[list]:
        cfg = self.config
        out = []
        for metric in ("recall_at_k", "tp_at_k", "avg_tp"):
            for method in (COAST, MDA):
                vals = self.values(method, metric)
                out.append([metric, cfg.q, cfg.k_true, cfg.sigma, method, float(np.mean(vals)),
                            ";".join(repr(float(v)) for v in vals)])
        return out


CSV_HEADER = ["metric", "q", "k", "sigma", "method", "mean", "per_seed"]


def results_csv(results: Sequence[BenchResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        w.writerows(r.rows())
    return buf.getvalue()


def run_seed(cfg: BenchConfig, seed: int) -> SeedResult:
    clock = {}
    t0 = time.perf_counter()
    gt = generate_ground_truth(cfg, seed)
    pair = generate_pair(gt, cfg, seed)
    names = pair.feature_names
    clock["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if cfg.graph_mode == "oracle":
        dag = gt.dag
    else:
        dag = discover_shared_backbone([pair.source, pair.target], cfg.discovery,
                                       seed=_rng.derive_seed(seed, "bench.discover"))
    scm_s = fit_scm(dag, pair.source, state_label=SOURCE)
    scm_t = fit_scm(dag, pair.target, state_label=TARGET, reference=scm_s)
    clock["graph_and_fit"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    report = attribute(pair, scm_s, scm_t, cfg.attribution, seed=_rng.derive_seed(seed, "bench.attribution"))
    clock["attribution"] = time.perf_counter() - t0

    flags = list(report.notes)
    k = cfg.k_true
    mc_seed = _rng.derive_seed(seed, "bench.transition")
    mda_order = [j for j, _ in mda_rank(pair)]
    metrics = {COAST: {}, MDA: {}}

    t0 = time.perf_counter()
    cand = report.selected_candidates
    if cand:
        w = weights_from_attributions(report.u[cand])
        problem = _base_problem(pair, scm_s, scm_t, cand, w, cfg.mc_n, mc_seed, cfg.gamma)
        grid = problem_grid(problem, cfg.epsilon, cfg.theta)
        path = solve_path(problem, grid, cfg.refit_support) if grid.values else RegPath([], grid, [grid.reason])
    else:
        path = RegPath([], None, ["no candidates"])
    flags.extend(path.notes)
    clock["optimize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if path.solutions:
        ranking = rank_targets(path, report.u, _rng.derive_seed(seed, "bench.tiebreak"))
        match, substituted = match_solution(path, k, cfg.refit_support)
        if substituted:
            flags.append(f"tp_at_k: no support of size {k}; used size {len(match.support)}")
        coast_tp = solution_score(match, cfg.refit_support)
        distinct = distinct_nonzero(path, cfg.refit_support)
    else:
        ranking = sorted(range(cfg.q), key=lambda j: (-report.u[j], names[j]))
        coast_tp, distinct = 0.0, []
    metrics[COAST]["recall_at_k"] = recall_at_k(ranking, gt.true_targets, k)
    metrics[COAST]["tp_at_k"] = coast_tp
    metrics[COAST]["avg_tp"] = (
        float(np.mean([solution_score(s, cfg.refit_support) for s in distinct])) if distinct else 0.0
    )
    metrics[COAST]["avg_tp_path"] = (
        float(np.mean([s.transition_pct for s in distinct_nonzero(path)])) if path.solutions else 0.0
    )

    metrics[MDA]["recall_at_k"] = recall_at_k(mda_order, gt.true_targets, k)
    sizes = [len(s.support) for s in distinct]
    mda_tp = mda_tp_matched(pair, scm_s, scm_t, sorted(set(sizes) | {k}), cfg.mc_n, mc_seed)
    metrics[MDA]["tp_at_k"] = mda_tp.get(k, 0.0)
    metrics[MDA]["avg_tp"] = float(np.mean([mda_tp[z] for z in sizes])) if sizes else 0.0
    clock["evaluate"] = time.perf_counter() - t0

    return SeedResult(
        seed=seed,
        true_targets=[names[t] for t in gt.true_targets],
        metrics=metrics,
        coast_ranking=[names[j] for j in ranking[: max(k, 10)]],
        mda_ranking=[names[j] for j in mda_order[: max(k, 10)]],
        candidates=[names[j] for j in cand],
        path_sizes=[len(s.support) for s in path.solutions],
        flags=flags,
        runtime=clock,
    )


def run_benchmark(cfg: BenchConfig) -> BenchResult:
    per_seed = pmap(lambda s: run_seed(cfg, s), cfg.seeds)
    return BenchResult(cfg, per_seed)
