"""DAGs over named features, multi-environment BIC hill-climbing, and a
local-Markov falsification check.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import _rng
from .data import Dataset
from .errors import ValidationError

Edge = tuple[str, str]
RIDGE = 1e-8


class CycleError(ValidationError):
    def __init__(self, cycle: Sequence[str]):
        self.cycle = list(cycle)
        super().__init__("cycle detected: " + " -> ".join(self.cycle + self.cycle[:1]))


def _find_cycle(nodes: Sequence[str], edges: Iterable[Edge]) -> list[str] | None:
    succ: dict[str, list[str]] = {v: [] for v in nodes}
    for u, v in edges:
        succ[u].append(v)
    color = dict.fromkeys(nodes, 0)
    for root in sorted(nodes):
        if color[root]:
            continue
        path = [root]
        color[root] = 1
        iters = [iter(sorted(succ[root]))]
        while iters:
            nxt = next(iters[-1], None)
            if nxt is None:
                color[path.pop()] = 2
                iters.pop()
                continue
            if color[nxt] == 1:
                return path[path.index(nxt):]
            if color[nxt] == 0:
                color[nxt] = 1
                path.append(nxt)
                iters.append(iter(sorted(succ[nxt])))
    return None


def topological_sort(nodes: Sequence[str], edges: Iterable[Edge]) -> list[str]:
    """Kahn's method, always releasing the lexicographically smallest ready node."""
    edges = list(edges)
    indeg = dict.fromkeys(nodes, 0)
    succ: dict[str, list[str]] = {v: [] for v in nodes}
    for u, v in edges:
        succ[u].append(v)
        indeg[v] += 1
    ready = [v for v in nodes if indeg[v] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        v = heapq.heappop(ready)
        order.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(ready, w)
    if len(order) != len(nodes):
        raise CycleError(_find_cycle(nodes, edges) or [])
    return order


@dataclass(frozen=True)
class Dag:
    node_names: tuple[str, ...]
    edges: frozenset[Edge] = frozenset()
    required_edges: frozenset[Edge] = frozenset()
    forbidden_edges: frozenset[Edge] = frozenset()

    def __post_init__(self):
        nodes = tuple(str(v) for v in self.node_names)
        if len(set(nodes)) != len(nodes):
            raise ValidationError("duplicate node names")
        object.__setattr__(self, "node_names", nodes)
        for attr in ("edges", "required_edges", "forbidden_edges"):
            es = frozenset((str(u), str(v)) for u, v in getattr(self, attr))
            object.__setattr__(self, attr, es)
        known = set(nodes)
        for u, v in self.edges | self.required_edges | self.forbidden_edges:
            if u not in known or v not in known:
                raise ValidationError(f"edge {u}->{v} references an unknown node")
        for u, v in self.edges:
            if u == v:
                raise ValidationError(f"self-loop on {u}")
        if not self.required_edges <= self.edges:
            missing = sorted(self.required_edges - self.edges)
            raise ValidationError(f"required edge(s) absent: {missing}")
        clash = self.edges & self.forbidden_edges
        if clash:
            raise ValidationError(f"forbidden edge(s) present: {sorted(clash)}")
        topological_sort(nodes, self.edges)

    @property
    def q(self) -> int:
        return len(self.node_names)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.node_names)}

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ValidationError(f"node {name!r} not in graph") from None

    @cached_property
    def parent_indices(self) -> tuple[tuple[int, ...], ...]:
        pa: list[list[int]] = [[] for _ in self.node_names]
        for u, v in self.edges:
            pa[self._index[v]].append(self._index[u])
        return tuple(tuple(sorted(p)) for p in pa)

    def parents(self, name: str) -> list[str]:
        return [self.node_names[j] for j in self.parent_indices[self.index(name)]]

    def children(self, name: str) -> list[str]:
        return sorted(v for u, v in self.edges if u == name)

    @cached_property
    def order(self) -> tuple[int, ...]:
        """Topological order as node indices."""
        return tuple(self._index[v] for v in topological_sort(self.node_names, self.edges))

    def descendants(self, name: str) -> set[str]:
        out: set[str] = set()
        stack = [name]
        while stack:
            for c in self.children(stack.pop()):
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out

    @cached_property
    def descendant_matrix(self) -> np.ndarray:
        """``D[i, j]`` is True when j is a strict descendant of i."""
        q = self.q
        D = np.zeros((q, q), dtype=bool)
        children: list[list[int]] = [[] for _ in range(q)]
        for u, v in self.edges:
            children[self._index[u]].append(self._index[v])
        for i in reversed(self.order):
            for c in children[i]:
                D[i, c] = True
                D[i] |= D[c]
        return D

    def with_edges(self, edges: Iterable[Edge]) -> "Dag":
        return Dag(self.node_names, frozenset(edges), self.required_edges, self.forbidden_edges)

    def to_dict(self) -> dict:
        return {"nodes": list(self.node_names), "edges": [list(e) for e in sorted(self.edges)]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict, required=(), forbidden=()) -> "Dag":
        return cls(tuple(d["nodes"]), frozenset(tuple(e) for e in d["edges"]),
                   frozenset(required), frozenset(forbidden))


def topological_order(dag: Dag) -> list[str]:
    return [dag.node_names[i] for i in dag.order]


def read_edge_list(path: str | Path) -> set[Edge]:
    """Edge-list CSV with a ``parent,child`` header."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and [c.strip().lower() for c in rows[0]] == ["parent", "child"]:
        rows = rows[1:]
    out = set()
    for i, r in enumerate(rows):
        if len(r) != 2:
            raise ValidationError(f"{path}: row {i + 2} must have two cells")
        out.add((r[0].strip(), r[1].strip()))
    return out


def edge_list_csv(edges: Iterable[Edge]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parent", "child"])
    for e in sorted(edges):
        w.writerow(e)
    return buf.getvalue()


def load_dag(path: str | Path, required=(), forbidden=()) -> Dag:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return Dag.from_dict(json.loads(path.read_text()), required, forbidden)
    edges = read_edge_list(path)
    nodes = sorted({u for e in edges for u in e})
    return Dag(tuple(nodes), frozenset(edges), frozenset(required), frozenset(forbidden))


# -- scoring -------------------------------------------------------------------


class _EnvStats:
    """Centered Gram matrix of one environment, for fast residual variances."""

    def __init__(self, values: np.ndarray):
        self.n = values.shape[0]
        xc = values - values.mean(axis=0)
        self.cov = xc.T @ xc / self.n

    def residual_variance(self, i: int, parents: Sequence[int]) -> float:
        if not parents:
            return float(self.cov[i, i])
        P = list(parents)
        A = self.cov[np.ix_(P, P)]
        ev = np.linalg.eigvalsh(A)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            # rank-deficient parents: jitter instead of failing
            A = A + RIDGE * np.eye(len(P))
        b = self.cov[P, i]
        beta = np.linalg.solve(A, b)
        return float(self.cov[i, i] - b @ beta)


def _log_var(v: float) -> float:
    return math.log(max(v, 1e-300))


class _Scorer:
    def __init__(self, datasets: Sequence[Dataset], names: Sequence[str]):
        for ds in datasets:
            if tuple(ds.feature_names) != tuple(names):
                raise ValidationError("datasets must share the graph's node names in order")
        self.envs = [_EnvStats(ds.values) for ds in datasets]
        self.cache: dict[tuple[int, frozenset[int]], float] = {}

    def local(self, i: int, parents: Iterable[int]) -> float:
        key = (i, frozenset(parents))
        hit = self.cache.get(key)
        if hit is None:
            P = sorted(key[1])
            hit = 0.0
            for env in self.envs:
                n = env.n
                hit += -(n / 2.0) * _log_var(env.residual_variance(i, P)) - (math.log(n) / 2.0) * (1 + len(P))
            self.cache[key] = hit
        return hit

    def total(self, parent_sets: Sequence[Iterable[int]]) -> float:
        return sum(self.local(i, pa) for i, pa in enumerate(parent_sets))


def multi_env_score(dag: Dag, datasets: Sequence[Dataset]) -> float:
    """Sum over environments of the Gaussian BIC; higher is better."""
    if not datasets:
        raise ValidationError("need at least one dataset")
    return _Scorer(datasets, dag.node_names).total(dag.parent_indices)


# -- hill climbing ---------------------------------------------------------------


@dataclass(frozen=True)
class DiscoveryConfig:
    max_parents: int = 5
    max_sweeps: int = 10_000
    score: str = "gaussian_bic"
    restart_seeds: int = 3

    def __post_init__(self):
        if self.max_parents < 0:
            raise ValidationError("max_parents must be >= 0")
        if self.score != "gaussian_bic":
            raise ValidationError(f"unsupported score {self.score!r}")
        if self.restart_seeds < 1:
            raise ValidationError("restart_seeds must be >= 1")


class _Climber:
    def __init__(self, scorer: _Scorer, q: int, cfg: DiscoveryConfig, required: set, forbidden: set):
        self.scorer = scorer
        self.q = q
        self.cfg = cfg
        self.required = required
        self.forbidden = forbidden

    def _reaches(self, children: list[set[int]], src: int, dst: int, skip: tuple[int, int] | None = None) -> bool:
        stack, seen = [src], {src}
        while stack:
            u = stack.pop()
            for v in children[u]:
                if skip is not None and (u, v) == skip:
                    continue
                if v == dst:
                    return True
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return False

    def _deltas(self, parents: list[set[int]], nodes: Iterable[int]) -> dict:
        """Score change of every move whose rescoring touches ``nodes``."""
        sc = self.scorer
        out = {}
        for v in nodes:
            base_v = sc.local(v, parents[v])
            for u in range(self.q):
                if u == v:
                    continue
                if u in parents[v]:
                    out[("del", u, v)] = sc.local(v, parents[v] - {u}) - base_v
                    base_u = sc.local(u, parents[u])
                    out[("rev", u, v)] = (
                        sc.local(v, parents[v] - {u}) - base_v + sc.local(u, parents[u] | {v}) - base_u
                    )
                elif v not in parents[u]:
                    out[("add", u, v)] = sc.local(v, parents[v] | {u}) - base_v
        return out

    def _valid(self, move, parents, children) -> bool:
        op, u, v = move
        cfg = self.cfg
        if op == "add":
            if (u, v) in self.forbidden or len(parents[v]) >= cfg.max_parents:
                return False
            return not self._reaches(children, v, u)
        if op == "del":
            return (u, v) not in self.required
        if (u, v) in self.required or (v, u) in self.forbidden or len(parents[u]) >= cfg.max_parents:
            return False
        return not self._reaches(children, u, v, skip=(u, v))

    def climb(self, parents: list[set[int]]) -> tuple[list[set[int]], float, list[float]]:
        children: list[set[int]] = [set() for _ in range(self.q)]
        for v, pa in enumerate(parents):
            for u in pa:
                children[u].add(v)
        score = self.scorer.total(parents)
        trace = [score]
        deltas = self._deltas(parents, range(self.q))
        for _ in range(self.cfg.max_sweeps):
            best = None
            for move in sorted(deltas, key=lambda m: (-deltas[m], m)):
                if deltas[move] <= 1e-9:
                    break
                if self._valid(move, parents, children):
                    best = move
                    break
            if best is None:
                break
            op, u, v = best
            if op in ("del", "rev"):
                parents[v].discard(u)
                children[u].discard(v)
            if op == "add":
                parents[v].add(u)
                children[u].add(v)
            if op == "rev":
                parents[u].add(v)
                children[v].add(u)
            score += deltas[best]
            trace.append(score)
            touched = {u, v}
            for m in [m for m in deltas if m[2] in touched or (m[0] == "rev" and m[1] in touched)]:
                del deltas[m]
            deltas.update(self._deltas(parents, touched))
            # reversal deltas of edges into other nodes depend on their parent's set
            for w in range(self.q):
                for p in parents[w]:
                    if p in touched and w not in touched:
                        base_w = self.scorer.local(w, parents[w])
                        deltas[("rev", p, w)] = (
                            self.scorer.local(w, parents[w] - {p}) - base_w
                            + self.scorer.local(p, parents[p] | {w}) - self.scorer.local(p, parents[p])
                        )
        return parents, self.scorer.total(parents), trace


def _random_start(q: int, rng: np.random.Generator, climber: _Climber, base: list[set[int]]) -> list[set[int]]:
    parents = [set(p) for p in base]
    children: list[set[int]] = [set() for _ in range(q)]
    for v, pa in enumerate(parents):
        for u in pa:
            children[u].add(v)
    for _ in range(q):
        u, v = (int(x) for x in rng.choice(q, size=2, replace=False))
        if u in parents[v] or v in parents[u]:
            continue
        if climber._valid(("add", u, v), parents, children):
            parents[v].add(u)
            children[u].add(v)
    return parents


def discover_shared_backbone(
    datasets: Sequence[Dataset],
    cfg: DiscoveryConfig | None = None,
    required: Iterable[Edge] = (),
    forbidden: Iterable[Edge] = (),
    seed: int = 0,
    return_trace: bool = False,
):
    """Greedy add/delete/reverse hill-climbing on the summed BIC of all environments.

    Restart 0 starts from the required edges alone; later restarts add a seeded
    random set of edges first. The best-scoring graph across restarts wins.
    """
    cfg = cfg or DiscoveryConfig()
    if not datasets:
        raise ValidationError("need at least one dataset")
    names = datasets[0].feature_names
    idx = {v: i for i, v in enumerate(names)}
    req = {(idx[u], idx[v]) for u, v in required}
    forb = {(idx[u], idx[v]) for u, v in forbidden}
    q = len(names)
    scorer = _Scorer(datasets, names)
    climber = _Climber(scorer, q, cfg, req, forb)
    base: list[set[int]] = [set() for _ in range(q)]
    for u, v in req:
        base[v].add(u)
    best = None
    traces = []
    for r in range(cfg.restart_seeds):
        start = base if r == 0 else _random_start(q, _rng.stream(seed + r, "discover.restart"), climber, base)
        parents, score, trace = climber.climb([set(p) for p in start])
        traces.append(trace)
        if best is None or score > best[1] + 1e-9:
            best = (parents, score)
    edges = frozenset((names[u], names[v]) for v, pa in enumerate(best[0]) for u in pa)
    dag = Dag(tuple(names), edges, frozenset(required), frozenset(forbidden))
    return (dag, traces) if return_trace else dag


# -- falsification ------------------------------------------------------------


@dataclass
class IndependenceTest:
    node: str
    other: str
    conditioning: list[str]
    partial_corr: float | None
    p: float | None
    rejected: bool
    skipped: bool = False


@dataclass
class FalsificationReport:
    significance: float
    tests: list[IndependenceTest] = field(default_factory=list)

    @property
    def tested_independencies(self) -> int:
        return sum(1 for t in self.tests if not t.skipped)

    @property
    def rejected(self) -> int:
        return sum(1 for t in self.tests if t.rejected)

    @property
    def skipped(self) -> int:
        return sum(1 for t in self.tests if t.skipped)

    @property
    def rejection_fraction(self) -> float:
        n = self.tested_independencies
        return self.rejected / n if n else 0.0

    def to_dict(self) -> dict:
        return {
            "significance": self.significance,
            "tested_independencies": self.tested_independencies,
            "rejected": self.rejected,
            "skipped": self.skipped,
            "rejection_fraction": self.rejection_fraction,
            "tests": [t.__dict__ for t in self.tests],
        }


def _residualize(X: np.ndarray, cols: Sequence[int], targets: Sequence[int]) -> np.ndarray:
    Y = X[:, targets] - X[:, targets].mean(axis=0)
    if not cols:
        return Y
    Z = X[:, cols] - X[:, cols].mean(axis=0)
    G = Z.T @ Z + RIDGE * np.eye(len(cols))
    return Y - Z @ np.linalg.solve(G, Z.T @ Y)


def partial_correlation(X: np.ndarray, i: int, j: int, cond: Sequence[int]) -> float:
    R = _residualize(X, list(cond), [i, j])
    a, b = R[:, 0], R[:, 1]
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return 0.0
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def fisher_z_pvalue(r: float, n: int, k: int) -> float:
    r = min(max(r, -1 + 1e-15), 1 - 1e-15)
    z = math.atanh(r) * math.sqrt(n - k - 3)
    return float(2.0 * stats.norm.sf(abs(z)))


def falsify(dag: Dag, ds: Dataset, significance: float = 0.05) -> FalsificationReport:
    """Test the local Markov condition: each node against every non-descendant
    non-parent, given its parents, by Fisher-z partial correlation.
    """
    if tuple(ds.feature_names) != dag.node_names:
        ds = ds.subset(dag.node_names)
    X = ds.values
    n = ds.n
    D = dag.descendant_matrix
    report = FalsificationReport(significance)
    for i, name in enumerate(dag.node_names):
        pa = list(dag.parent_indices[i])
        cond_names = [dag.node_names[c] for c in pa]
        for j in range(dag.q):
            if j == i or j in pa or D[i, j]:
                continue
            other = dag.node_names[j]
            if len(pa) > n - 3 - 1:
                report.tests.append(IndependenceTest(name, other, cond_names, None, None, False, True))
                continue
            r = partial_correlation(X, i, j, pa)
            p = fisher_z_pvalue(r, n, len(pa))
            report.tests.append(IndependenceTest(name, other, cond_names, r, p, p < significance))
    return report
