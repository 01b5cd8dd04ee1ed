import contextlib

import numpy as np
import pytest

from coast.data import SOURCE, TARGET, Dataset, StatePair
from coast.graph import Dag
from coast.optimize import InterventionProblem, objective, problem_grid, smooth_loss, solve
from coast.scm import scm_from_weights


def make_pair(src, tgt, names=None):
    src = np.asarray(src, dtype=float)
    tgt = np.asarray(tgt, dtype=float)
    if src.ndim == 1:
        src, tgt = src[:, None], tgt[:, None]
    names = names or tuple(f"f{j}" for j in range(src.shape[1]))
    return StatePair(Dataset(SOURCE, names, src), Dataset(TARGET, names, tgt))


def random_linear_pair(rng, q=5, p_edge=0.5, changed=None, shift_intercepts=True):
    """Two linear-Gaussian SCMs on one random DAG; ``changed`` nodes get new mechanisms."""
    names = tuple(f"v{j}" for j in range(q))
    perm = rng.permutation(q)
    W = np.zeros((q, q))
    for a in range(q):
        for b in range(a + 1, q):
            if rng.random() < p_edge:
                W[perm[a], perm[b]] = rng.choice([-1, 1]) * rng.uniform(0.5, 1.5)
    edges = frozenset((names[i], names[j]) for i, j in zip(*np.nonzero(W)))
    dag = Dag(names, edges)
    b0 = rng.normal(size=q)
    var = rng.uniform(0.5, 1.5, size=q)
    changed = list(range(q)) if changed is None else list(changed)
    W2, b2 = W.copy(), b0.copy()
    for j in changed:
        W2[:, j] = np.where(W[:, j] != 0, W[:, j] * rng.uniform(0.2, 1.8, size=q), 0.0)
        if shift_intercepts:
            b2[j] = b0[j] + rng.normal(scale=2.0)
    s = scm_from_weights(dag, W, b0, var, SOURCE)
    t = scm_from_weights(dag, W2, b2, var, TARGET)
    return s, t


# -- optimizer problems and oracles ----------------------------------------------------


def random_problem(rng, q=None, penalties=True, **kw):
    q = q or int(rng.integers(3, 8))
    s, t = random_linear_pair(rng, q=q)
    k = int(rng.integers(1, q + 1))
    cand = tuple(sorted(rng.choice(q, size=k, replace=False).tolist()))
    args = dict(candidates=cand, weights=rng.uniform(0.1, 1.0, size=k), gamma=float(rng.uniform(0, 1)),
                mc_n=2000)
    if penalties:
        spread = np.abs(s.model_mean()).max() + 1
        if rng.random() < 0.6:
            args["box"] = (-rng.uniform(0.2, 1.0) * spread, rng.uniform(0.2, 1.0) * spread)
        if rng.random() < 0.6:
            args["rc_bound"] = float(rng.uniform(0.05, 1.0))
    args.update(kw)
    return InterventionProblem(s, t, **args)


def central_difference(problem, alpha, h=1e-6):
    g = np.zeros(problem.k)
    for i in range(problem.k):
        step = h * (1 + abs(alpha[i]))
        up, dn = alpha.copy(), alpha.copy()
        up[i] += step
        dn[i] -= step
        g[i] = (smooth_loss(problem, up)[0] - smooth_loss(problem, dn)[0]) / (2 * step)
    return g


def grid_objective(problem, lam, a, b):
    """Independent vectorized objective on a 2-D grid of (alpha_0, alpha_1)."""
    Js, Jt = problem.jac_source, problem.jac_target
    total = lam * (problem.weights[0] * np.abs(a) + problem.weights[1] * np.abs(b))
    rho = problem.penalty_weight
    for J, xbar, scale in ((Js, problem.xbar_source, 1.0), (Jt, problem.xbar_target, problem.gamma)):
        for r in range(problem.q):
            x = xbar[r] + J[r, 0] * a + J[r, 1] * b
            total = total + scale * (x - problem.xbar_target[r]) ** 2
            if problem.box is not None:
                lo, hi = problem.box[0][r], problem.box[1][r]
                total = total + rho * (np.maximum(x - hi, 0) ** 2 + np.maximum(lo - x, 0) ** 2)
            if problem.rc_bound is not None:
                total = total + rho * np.maximum(np.abs(x) - problem.rc_bound * abs(xbar[r]), 0) ** 2
    return total


def brute_force_min(problem, lam):
    # the objective is convex, so a fine grid around the best coarse cell finds the
    # 0.001-resolution optimum; the window grows if the best point sits on its edge
    coarse = np.round(np.linspace(-5, 5, 1001), 10)
    A, B = np.meshgrid(coarse, coarse, indexing="ij")
    F = grid_objective(problem, lam, A, B)
    i, j = np.unravel_index(np.argmin(F), F.shape)
    center = np.array([coarse[i], coarse[j]])
    half = 50
    while True:
        ia = np.clip(np.round(center[0] * 1000) + np.arange(-half, half + 1), -5000, 5000) / 1000
        ib = np.clip(np.round(center[1] * 1000) + np.arange(-half, half + 1), -5000, 5000) / 1000
        A, B = np.meshgrid(ia, ib, indexing="ij")
        F = grid_objective(problem, lam, A, B)
        i, j = np.unravel_index(np.argmin(F), F.shape)
        on_edge = (i in (0, len(ia) - 1) and abs(ia[i]) < 5) or (j in (0, len(ib) - 1) and abs(ib[j]) < 5)
        if not on_edge:
            return float(F[i, j]), np.array([ia[i], ib[j]])
        center = np.array([ia[i], ib[j]])


def active_penalty(problem, alpha):
    # with a hinge active the curvature reaches rho = 1e3, so the grid itself can sit
    # above the continuous optimum by more than 1e-4; only the one-sided bound applies
    xs, xt = problem.means(alpha)
    for x, xbar in ((xs, problem.xbar_source), (xt, problem.xbar_target)):
        if problem.box is not None and (np.any(x > problem.box[1]) or np.any(x < problem.box[0])):
            return True
        if problem.rc_bound is not None and np.any(np.abs(x) > problem.rc_bound * np.abs(xbar)):
            return True
    return False


def two_candidate_problem(rng):
    """Random 2-candidate problem and lambda whose optimum lies inside [-5, 5]^2."""
    while True:
        s, t = random_linear_pair(rng, q=3)
        cand = tuple(sorted(rng.choice(3, size=2, replace=False).tolist()))
        kw = {}
        if rng.random() < 0.5:
            kw["box"] = (-2.0, 2.0)
        if rng.random() < 0.5:
            kw["rc_bound"] = float(rng.uniform(0.5, 2.0))
        p = InterventionProblem(s, t, cand, weights=rng.uniform(0.2, 1, 2), gamma=float(rng.uniform(0, 1)),
                                mc_n=500, **kw)
        lam = float(rng.uniform(0, 0.5)) * problem_grid(p).lambda_max
        sol = solve(p, lam)
        if np.all(np.abs(sol.alpha) <= 4.9):
            return p, lam, sol


def check_against_grid(problem, lam, sol, gap=1e-4):
    best, at = brute_force_min(problem, lam)
    mine = objective(problem, sol.alpha, lam)
    assert mine == pytest.approx(float(grid_objective(problem, lam, sol.alpha[0], sol.alpha[1])), rel=1e-10)
    assert mine <= best + gap
    assert np.max(np.abs(at - sol.alpha)) <= 1e-3
    if not active_penalty(problem, sol.alpha):
        assert abs(mine - best) <= gap


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting -----------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS, FAIL or SKIP for one acceptance criterion; failures still raise.

    The yielded dict collects measured values shown next to the verdict.
    """
    info: dict[str, object] = {}

    def detail():
        return ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in info.items())

    try:
        yield info
    except pytest.skip.Exception:
        ACCEPTANCE[number] = ("SKIP", title, detail() or "opt-in")
        raise
    except BaseException:
        ACCEPTANCE[number] = ("FAIL", title, detail())
        raise
    ACCEPTANCE[number] = ("PASS", title, detail())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}" + (f" ({detail})" if detail else ""))
