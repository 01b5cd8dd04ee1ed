"""Feature selection: univariate shift tests with FDR control, regulator
expansion by elastic-net neighborhoods, and betweenness-aware refinement.
"""

from __future__ import annotations

import csv
import io
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from ._parallel import pmap
from .data import StatePair
from .errors import ConvergenceError, ValidationError

NORMALITY_MODES = ("welch", "mann_whitney", "auto")


@dataclass(frozen=True)
class SelectionConfig:
    fdr_level: float = 0.05
    abs_effect_threshold: float = 0.0
    normality_mode: str = "auto"
    prior_features: frozenset[str] = frozenset()
    regulators_per_key: int = 5
    top_k_per_key: int = 0
    alpha_mix: float = 0.5
    edge_weight_floor: float = 0.0
    l1_penalty: float = 0.5
    l2_penalty: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "prior_features", frozenset(self.prior_features))
        if not 0 < self.fdr_level < 1:
            raise ValidationError(f"fdr_level must be in (0, 1), got {self.fdr_level}")
        if self.abs_effect_threshold < 0:
            raise ValidationError("abs_effect_threshold must be >= 0")
        if self.normality_mode not in NORMALITY_MODES:
            raise ValidationError(f"normality_mode must be one of {NORMALITY_MODES}")
        if self.regulators_per_key < 0 or self.top_k_per_key < 0:
            raise ValidationError("regulators_per_key and top_k_per_key must be >= 0")
        if not 0 <= self.alpha_mix <= 1:
            raise ValidationError("alpha_mix must be in [0, 1]")
        if self.edge_weight_floor < 0:
            raise ValidationError("edge_weight_floor must be >= 0")


# -- univariate tests -------------------------------------------------------


def welch_t(a, b) -> tuple[float, float]:
    """Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom.

    One sample may have zero variance; both having zero variance is degenerate.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValidationError("welch_t needs at least two observations per sample")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    if not se2 > 0:
        raise ValidationError("welch_t: degenerate variance (both samples constant)")
    stat = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = 2.0 * stats.t.sf(abs(stat), df)
    return float(stat), float(min(1.0, p))


def mann_whitney_u(a, b) -> tuple[float, float]:
    """U statistic of ``a`` and the two-sided normal-approximation p-value.

    Uses midranks, the tie-corrected variance and a 0.5 continuity correction.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n1, n2 = a.size, b.size
    if n1 < 1 or n2 < 1:
        raise ValidationError("mann_whitney_u needs non-empty samples")
    ranks = stats.rankdata(np.concatenate([a, b]))
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    n = n1 + n2
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = (counts**3 - counts).sum() / (n * (n - 1)) if n > 1 else 0.0
    sigma = np.sqrt(n1 * n2 / 12.0 * ((n + 1) - tie_term))
    mu = n1 * n2 / 2.0
    if not sigma > 0:
        return float(u), 1.0
    z = max(abs(u - mu) - 0.5, 0.0) / sigma
    p = 2.0 * stats.norm.sf(z)
    return float(u), float(min(1.0, p))


def bh_adjust(pvals) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(pvals, dtype=float)
    if p.ndim != 1:
        raise ValidationError("bh_adjust expects a vector")
    if p.size == 0:
        return p.copy()
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValidationError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = np.array([p[i] * m / (r + 1) for r, i in enumerate(order)])
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty(m)
    # p*m/rank >= p holds exactly; the max undoes one-ulp rounding at rank m
    out[order] = np.clip(np.maximum(ranked, p[order]), 0.0, 1.0)
    return out


def _use_welch(a: np.ndarray, b: np.ndarray, mode: str) -> bool:
    if mode == "welch":
        return True
    if mode == "mann_whitney":
        return False
    if a.size < 20 or b.size < 20:
        return False
    return bool(abs(_skew(a)) < 1 and abs(_skew(b)) < 1)


def _skew(x: np.ndarray) -> float:
    # a constant column (e.g. a surgically fixed node) is symmetric
    if np.ptp(x) <= 1e-12 * max(1.0, float(np.abs(x).max())):
        return 0.0
    return float(stats.skew(x))


def feature_pvalue(a: np.ndarray, b: np.ndarray, mode: str = "welch") -> float:
    """Shift p-value for one feature; constant-vs-constant columns are decided exactly."""
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return 1.0 if a[0] == b[0] else 0.0
    if _use_welch(a, b, mode):
        return welch_t(a, b)[1]
    return mann_whitney_u(a, b)[1]


def shift_pvalues(pair: StatePair, mode: str = "welch") -> np.ndarray:
    s, t = pair.source.values, pair.target.values
    return np.array([feature_pvalue(s[:, j], t[:, j], mode) for j in range(pair.p)])


def select_key_features(pair: StatePair, cfg: SelectionConfig) -> list[int]:
    """Indices of significantly shifted features, plus any prior-knowledge features."""
    return _key_features(pair, cfg)[0]


def _key_features(pair: StatePair, cfg: SelectionConfig):
    names = pair.feature_names
    missing = sorted(set(cfg.prior_features) - set(names))
    if missing:
        raise ValidationError(f"prior feature(s) not in dataset: {', '.join(missing)}")
    raw = shift_pvalues(pair, cfg.normality_mode)
    adj = bh_adjust(raw)
    effect = np.abs(pair.source.values.mean(axis=0) - pair.target.values.mean(axis=0))
    keep = (adj < cfg.fdr_level) & (effect >= cfg.abs_effect_threshold)
    key = {j for j in range(pair.p) if keep[j]}
    key |= {names.index(f) for f in cfg.prior_features}
    return sorted(key), raw, adj


# -- regulator expansion ------------------------------------------------------


def elastic_net(
    X: np.ndarray,
    y: np.ndarray,
    l1: float = 0.5,
    l2: float = 0.5,
    tol: float = 1e-6,
    max_sweeps: int = 10_000,
) -> np.ndarray:
    """Cyclic coordinate descent for
    ``(1/2n)||y - Xb||^2 + l1 ||b||_1 + (l2/2) ||b||^2`` on centered data.

    Raises ConvergenceError if no sweep moves every coefficient by less than ``tol``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    Xc = X - X.mean(axis=0)
    r = y - y.mean()
    col_sq = (Xc**2).sum(axis=0) / n
    beta = np.zeros(p)
    for _ in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            if col_sq[j] == 0:
                continue
            old = beta[j]
            rho = Xc[:, j] @ r / n + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - l1, 0.0) / (col_sq[j] + l2)
            if new != old:
                r -= Xc[:, j] * (new - old)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta < tol:
            return beta
    raise ConvergenceError(f"elastic net did not converge in {max_sweeps} sweeps")


def _top_by(scores: dict[int, float], names: Sequence[str], k: int) -> list[int]:
    ordered = sorted(scores, key=lambda j: (-scores[j], names[j]))
    return ordered[:k]


def regulator_weights(pair: StatePair, key: Iterable[int], cfg: SelectionConfig) -> dict[tuple[int, int], float]:
    """Raw |elastic-net coefficient| for every (regulator, key feature) pair, pooled rows."""
    X = pair.pooled().values
    names = pair.feature_names
    key = list(key)

    def fit(t: int):
        others = [j for j in range(pair.p) if j != t]
        try:
            beta = elastic_net(X[:, others], X[:, t], cfg.l1_penalty, cfg.l2_penalty)
        except ConvergenceError as exc:
            raise ConvergenceError(f"{exc} (key feature {names[t]!r})") from None
        return {(r, t): abs(float(b)) for r, b in zip(others, beta)}

    table: dict[tuple[int, int], float] = {}
    for part in pmap(fit, key):
        table.update(part)
    return table


def expand_regulators(pair: StatePair, key: Iterable[int], cfg: SelectionConfig):
    """Return ``(expanded_set, weights)`` with weights normalized by the global maximum.

    ``weights`` covers every (regulator, key) pair that was fitted, so later
    refinement can re-rank inside the expanded set.
    """
    key = sorted(key)
    names = pair.feature_names
    raw = regulator_weights(pair, key, cfg)
    top = max(raw.values(), default=0.0)
    weights = {pair_: (v / top if top > 0 else 0.0) for pair_, v in raw.items()}
    expanded = set(key)
    if cfg.regulators_per_key > 0:
        for t in key:
            cand = {r: w for (r, tt), w in weights.items() if tt == t and w > 0}
            expanded.update(_top_by(cand, names, cfg.regulators_per_key))
    return sorted(expanded), weights


# -- betweenness ---------------------------------------------------------------


def betweenness(nodes: Sequence, edges: Iterable[tuple]) -> dict:
    """Unweighted directed betweenness by Brandes accumulation.

    Normalized by ``(|V|-1)(|V|-2)``; graphs with fewer than three nodes score 0.
    """
    nodes = list(nodes)
    succ: dict = {v: [] for v in nodes}
    for u, v in edges:
        if v not in succ[u]:
            succ[u].append(v)
    cb = {v: 0.0 for v in nodes}
    for s in nodes:
        stack = []
        pred: dict = {v: [] for v in nodes}
        sigma = dict.fromkeys(nodes, 0)
        sigma[s] = 1
        dist = dict.fromkeys(nodes, -1)
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in succ[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    pred[w].append(v)
        delta = dict.fromkeys(nodes, 0.0)
        while stack:
            w = stack.pop()
            for v in pred[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                cb[w] += delta[w]
    n = len(nodes)
    if n < 3:
        return dict.fromkeys(nodes, 0.0)
    scale = 1.0 / ((n - 1) * (n - 2))
    return {v: c * scale for v, c in cb.items()}


def regulator_graph(expanded: Sequence[int], weights: dict, floor: float) -> list[tuple[int, int]]:
    members = set(expanded)
    return sorted(
        (r, t) for (r, t), w in weights.items() if r in members and t in members and w > 0 and w >= floor
    )


# -- refinement ----------------------------------------------------------------


@dataclass(frozen=True)
class HybridRow:
    regulator: int
    target: int
    w: float
    b: float
    h: float


def refine_regulators(
    weights: dict[tuple[int, int], float],
    bscores: dict[int, float],
    cfg: SelectionConfig,
    key: Sequence[int],
    names: Sequence[str],
    candidates: Sequence[int] | None = None,
):
    """Rank each key feature's regulators by ``alpha*w + (1-alpha)*b`` and keep the top K.

    Returns ``(refined_set, rows)``. ``top_k_per_key == 0`` keeps every candidate.
    """
    a = cfg.alpha_mix
    pool = set(candidates) if candidates is not None else {r for r, _ in weights}
    rows: list[HybridRow] = []
    refined = set(key)
    for t in key:
        scores = {}
        for r in sorted(pool):
            if r == t or (r, t) not in weights:
                continue
            w = weights[(r, t)]
            b = bscores.get(r, 0.0)
            h = a * w + (1 - a) * b
            scores[r] = h
            rows.append(HybridRow(r, t, w, b, h))
        if cfg.top_k_per_key == 0:
            refined.update(pool)
        else:
            refined.update(_top_by(scores, names, cfg.top_k_per_key))
    return sorted(refined), rows


# -- report --------------------------------------------------------------------


@dataclass
class SelectionReport:
    feature_names: tuple[str, ...]
    raw_pvalues: np.ndarray
    adjusted_pvalues: np.ndarray
    key_set: list[int]
    expanded_set: list[int]
    refined_set: list[int]
    hybrid_scores: list[HybridRow] = field(default_factory=list)
    config: SelectionConfig | None = None

    def names(self, idx: Iterable[int]) -> list[str]:
        return [self.feature_names[i] for i in idx]

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "config": None
            if cfg is None
            else {**cfg.__dict__, "prior_features": sorted(cfg.prior_features)},
            "features": [
                {"feature": n, "p": float(p), "p_adj": float(q)}
                for n, p, q in zip(self.feature_names, self.raw_pvalues, self.adjusted_pvalues)
            ],
            "key_set": self.names(self.key_set),
            "expanded_set": self.names(self.expanded_set),
            "refined_set": self.names(self.refined_set),
            "hybrid_scores": [
                {
                    "regulator": self.feature_names[r.regulator],
                    "target": self.feature_names[r.target],
                    "w": r.w,
                    "b": r.b,
                    "h": r.h,
                }
                for r in self.hybrid_scores
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def hybrid_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["regulator", "target", "w", "b", "h"])
        for r in self.hybrid_scores:
            w.writerow([self.feature_names[r.regulator], self.feature_names[r.target], r.w, r.b, r.h])
        return buf.getvalue()


def run_selection(pair: StatePair, cfg: SelectionConfig | None = None) -> SelectionReport:
    """Steps 1-4 of feature selection on a (typically standardized) state pair."""
    cfg = cfg or SelectionConfig()
    names = pair.feature_names
    key, raw, adj = _key_features(pair, cfg)
    expanded, weights = expand_regulators(pair, key, cfg) if key else (list(key), {})
    refined, rows = list(expanded), []
    if cfg.top_k_per_key > 0 and key:
        edges = regulator_graph(expanded, weights, cfg.edge_weight_floor)
        bscores = betweenness(expanded, edges)
        refined, rows = refine_regulators(weights, bscores, cfg, key, names, candidates=expanded)
    return SelectionReport(names, raw, adj, key, expanded, refined, rows, cfg)
