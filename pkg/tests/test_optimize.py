import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coast.errors import ValidationError
from coast.graph import Dag
from coast.optimize import (
    InterventionProblem,
    RegPath,
    Solution,
    gradient_at_zero,
    lambda_grid,
    persistence,
    prioritize_and_solve,
    problem_grid,
    rank_subsets,
    rank_targets,
    screen_single_targets,
    smooth_loss,
    soft_threshold,
    solve,
    solve_path,
    transition_percentage,
    weights_from_attributions,
)
from coast.scm import sample_shift, scm_from_weights

from conftest import (
    check_against_grid,
    central_difference,
    random_linear_pair,
    random_problem,
    two_candidate_problem,
)


def empty_pair(xs, xt):
    q = len(xs)
    dag = Dag(tuple(f"e{i}" for i in range(q)), frozenset())
    s = scm_from_weights(dag, np.zeros((q, q)), xs)
    t = scm_from_weights(dag, np.zeros((q, q)), xt)
    return s, t


def chain_pair(q=4, shift=2.0):
    names = tuple(f"c{i}" for i in range(q))
    dag = Dag(names, frozenset((names[i], names[i + 1]) for i in range(q - 1)))
    W = np.zeros((q, q))
    for i in range(q - 1):
        W[i, i + 1] = 0.9
    s = scm_from_weights(dag, W, np.zeros(q))
    t = scm_from_weights(dag, W, [shift] + [0.0] * (q - 1))
    return s, t


def fake_solution(alpha, candidates=(0, 1), names=("a", "b"), lam=1.0, tp=50.0):
    return Solution(lam, np.asarray(alpha, float), candidates, names, tp, 0.0, 0.0,
                    {"C1": {"ok": True, "worst_violation": 0.0}}, True, 1)


# -- weights and gradient ------------------------------------------------------------


def test_weights_examples():
    np.testing.assert_allclose(weights_from_attributions([4, 1]), [0.25, 1.0])
    np.testing.assert_array_equal(weights_from_attributions([3, 3, 3]), [1, 1, 1])
    w = weights_from_attributions([1, 0])
    assert w[1] == 1.0 and 0 < w[0] <= 1e-6
    with pytest.raises(ValidationError):
        weights_from_attributions([0, 0])
    with pytest.raises(ValidationError):
        weights_from_attributions([1, -1])


def test_gradient_at_zero_examples():
    s, t = empty_pair([0.0, 0.0], [0.0, 0.0])
    np.testing.assert_array_equal(gradient_at_zero(InterventionProblem(s, t, (0, 1))), [0, 0])
    s, t = empty_pair([1.0, -2.0], [0.0, 0.0])
    for gamma in (0.0, 0.7):
        p = InterventionProblem(s, t, (0, 1), gamma=gamma)
        np.testing.assert_array_equal(gradient_at_zero(p), [2.0, -4.0])
        # the true loss gradient agrees when every Jacobian is the identity
        np.testing.assert_allclose(smooth_loss(p, np.zeros(2))[1], [2.0, -4.0])


# -- lambda grid ------------------------------------------------------------------------


def test_lambda_grid_examples():
    assert lambda_grid([2, -4], [1, 0.5]).lambda_max == 8.0
    g = lambda_grid([2, -4], [1, 0.5], 1e-3, 2)
    assert g.values == (8.0, 8.0 * 1e-3)
    g = lambda_grid([1.0], [1.0], 1e-3, 4)
    ratios = np.array(g.values[1:]) / np.array(g.values[:-1])
    np.testing.assert_allclose(ratios, 0.1, rtol=1e-12)
    assert g.lambda_min == pytest.approx(1e-3)


def test_lambda_grid_errors_and_zero_gradient():
    with pytest.raises(ValidationError):
        lambda_grid([1.0], [1.0], theta=1)
    with pytest.raises(ValidationError):
        lambda_grid([1.0], [1.0], epsilon=0.1)
    g = lambda_grid([0.0, 0.0], [1.0, 1.0])
    assert g.values == () and "zero gradient" in g.reason


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.integers(2, 40), st.floats(1e-4, 1e-3))
def test_lambda_grid_is_geometric(g, theta, eps):
    g = np.array(g)
    if not np.any(g != 0):
        return
    grid = lambda_grid(g, np.ones(g.size), eps, theta)
    v = np.array(grid.values)
    assert len(v) == theta and v[0] == grid.lambda_max
    assert np.all(np.diff(v) < 0)
    np.testing.assert_allclose(v[1:] / v[:-1], eps ** (1 / (theta - 1)), rtol=1e-9)
    assert v[-1] == pytest.approx(eps * v[0], rel=1e-12)


# -- smooth loss ------------------------------------------------------------------------


def test_smooth_loss_origin_value(rng):
    p = random_problem(rng, penalties=False)
    value, _ = smooth_loss(p, np.zeros(p.k))
    assert value == pytest.approx(np.sum((p.xbar_source - p.xbar_target) ** 2), rel=1e-12)


def test_smooth_loss_empty_graph_quadratic(rng):
    xs, xt = rng.normal(size=4), rng.normal(size=4)
    s, t = empty_pair(xs, xt)
    p = InterventionProblem(s, t, (0, 1, 2, 3))
    a = rng.normal(size=4)
    assert smooth_loss(p, a)[0] == pytest.approx(np.sum((xs + a - xt) ** 2), rel=1e-12)
    value, grad = smooth_loss(p, xt - xs)
    assert value == pytest.approx(0.0, abs=1e-24)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_smooth_loss_rejects_nonactionable_alpha(rng):
    s, t = random_linear_pair(rng, q=3)
    p = InterventionProblem(s, t, (0, 1), actionable=(0,))
    with pytest.raises(ValidationError):
        smooth_loss(p, np.array([0.0, 1.0]))


def test_gradient_matches_finite_differences_with_active_penalties(rng):
    active = 0
    for _ in range(20):
        p = random_problem(rng, box=(-0.3, 0.3), rc_bound=0.2)
        alpha = rng.normal(size=p.k)
        xs, xt = p.means(alpha)
        active += bool(np.any(np.abs(xs) > 0.3) or np.any(np.abs(xt) > 0.3))
        _, grad = smooth_loss(p, alpha)
        fd = central_difference(p, alpha)
        assert np.linalg.norm(grad - fd) <= 1e-5 * max(np.linalg.norm(fd), 1.0)
    assert active == 20


# -- solver -------------------------------------------------------------------------------


def test_kkt_zero_solution_at_lambda_max(rng):
    for _ in range(100):
        p = random_problem(rng)
        grid = problem_grid(p)
        sol = solve(p, grid.lambda_max * (1 + 1e-12))
        assert np.all(sol.alpha == 0.0)
        assert sol.support == ()


def test_scalar_lasso_closed_form(rng):
    for _ in range(10):
        xs, xt = rng.normal(size=3), rng.normal(size=3)
        s, t = empty_pair(xs, xt)
        p = InterventionProblem(s, t, (1,))
        lam = float(rng.uniform(0, 3))
        sol = solve(p, lam)
        expected = soft_threshold(xt[1] - xs[1], lam * 1.0 / 2)
        assert sol.alpha[0] == pytest.approx(expected, abs=1e-7)


def test_solver_matches_brute_force_grid(rng):
    for _ in range(25):
        check_against_grid(*two_candidate_problem(rng))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.integers(0, 10_000))
def test_scalar_support_monotone(l1, l2, seed):
    rng = np.random.default_rng(seed)
    s, t = random_linear_pair(rng, q=4)
    p = InterventionProblem(s, t, (int(rng.integers(4)),), gamma=float(rng.uniform(0, 1)), mc_n=200)
    lo, hi = sorted((l1, l2))
    assert abs(solve(p, hi).alpha[0]) <= abs(solve(p, lo).alpha[0]) + 1e-7


def test_feasible_solutions_stay_feasible_on_fresh_simulation(rng):
    checked = 0
    for _ in range(10):
        s, t = random_linear_pair(rng, q=5)
        reach = max(np.abs(s.model_mean()).max(), np.abs(t.model_mean()).max())
        # the origin satisfies both constraints, so the path starts feasible
        p = InterventionProblem(s, t, tuple(range(5)), box=(-1.2 * reach, 1.2 * reach), rc_bound=2.0, mc_n=5000)
        for sol in solve_path(p, problem_grid(p, theta=6)).solutions:
            if not sol.feasible:
                continue
            checked += 1
            xs, xt = p.simulated_means(sol.alpha, seed=987_654, n=5000)
            for x, xbar, scm in ((xs, p.xbar_source, p.scm_source), (xt, p.xbar_target, p.scm_target)):
                se = sample_shift(scm, p.shift(sol.alpha), 5000, 987_654).values.std(axis=0) / np.sqrt(5000)
                lo, hi = p.box
                assert np.all(x - hi <= p.feasibility_tol + 2 * se)
                assert np.all(lo - x <= p.feasibility_tol + 2 * se)
                assert np.all(np.abs(x) - 2.0 * np.abs(xbar) <= p.feasibility_tol + 2 * se)
    assert checked > 0


# -- path --------------------------------------------------------------------------------


def test_path_starts_empty_and_is_ordered(rng):
    p = random_problem(rng, penalties=False)
    grid = problem_grid(p, theta=8)
    path = solve_path(p, grid)
    assert [s.lam for s in path.solutions] == sorted(grid.values, reverse=True)
    assert path.solutions[0].support == ()
    lines = path.table_csv().splitlines()
    assert lines[0] == "lambda,support_size,transition_pct" and len(lines) == 9
    assert len(path.heatmap_csv().splitlines()) == 9
    assert len(json.loads(path.to_json())["solutions"]) == 8


def test_duplicate_lambda_identical(rng):
    p = random_problem(rng, penalties=False)
    lam = problem_grid(p).lambda_max / 10
    path = solve_path(p, [lam, lam])
    a, b = path.solutions
    np.testing.assert_array_equal(a.alpha, b.alpha)
    assert a.transition_pct == b.transition_pct


def test_chain_root_in_smallest_lambda_solution():
    s, t = chain_pair()
    p = InterventionProblem(s, t, (0, 1, 2, 3))
    path = solve_path(p, problem_grid(p))
    assert 0 in path.solutions[-1].support
    assert path.solutions[-1].transition_pct > 99


def test_refit_scores_each_support(rng):
    s, t = chain_pair()
    p = InterventionProblem(s, t, (0, 1, 2, 3))
    path = solve_path(p, problem_grid(p, theta=6), refit_support=True)
    for sol in path.solutions:
        if not sol.support:
            assert sol.refit_transition_pct == 0.0
        else:
            assert sol.refit_transition_pct >= sol.transition_pct - 1e-6


# -- transition percentage ---------------------------------------------------------------


def test_transition_percentage_identities(rng):
    xs, xt = rng.normal(size=5), rng.normal(size=5)
    assert transition_percentage(xs, xt, xt) == 100.0
    assert transition_percentage(xs, xt, xs) == 0.0
    assert transition_percentage([0, 0], [2, 0], [1, 0]) == 75.0
    with pytest.raises(ValidationError):
        transition_percentage(xs, xs, xt)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-10, 10), min_size=n, max_size=n),
    st.lists(st.floats(-10, 10), min_size=n, max_size=n),
    st.lists(st.floats(-10, 10), min_size=n, max_size=n),
    st.permutations(range(n)))))
def test_transition_percentage_permutation_invariant(case):
    xs, xt, xd, perm = (np.array(v) for v in case)
    if np.sum((xs - xt) ** 2) < 1e-6:
        return
    a = transition_percentage(xs, xt, xd)
    b = transition_percentage(xs[perm], xt[perm], xd[perm])
    assert a == pytest.approx(b, rel=1e-12, abs=1e-9)


# -- persistence and ranking --------------------------------------------------------------


def test_persistence_examples():
    sols = [fake_solution([1.0, 0.0])] * 3 + [fake_solution([0.0, 0.0])] * 5 + [fake_solution([1.0, 1.0])] * 2
    rep = persistence(RegPath(sols))
    assert rep.set_persistence[frozenset({0})] == pytest.approx(0.3)
    assert sum(rep.set_persistence.values()) == pytest.approx(1.0)
    assert rep.target_persistence == {0: pytest.approx(0.5), 1: pytest.approx(0.2)}
    always = persistence(RegPath([fake_solution([1.0, 0.0])] * 4))
    assert always.target_persistence[0] == 1.0
    with pytest.raises(ValidationError):
        persistence(RegPath([]))


def test_rank_targets_examples():
    path = RegPath([fake_solution([1.0, 1.0])] * 2 + [fake_solution([1.0, 0.0])] * 3)
    assert rank_targets(path, [0.0, 9.0])[0] == 0
    tie = RegPath([fake_solution([1.0, 1.0])])
    assert rank_targets(tie, [1.0, 5.0]) == [1, 0]
    names = tuple(f"n{i}" for i in range(6))
    flat = RegPath([fake_solution(np.zeros(6), tuple(range(6)), names)])
    orders = {tuple(rank_targets(flat, np.ones(6), seed)) for seed in range(8)}
    assert rank_targets(flat, np.ones(6), 3) == rank_targets(flat, np.ones(6), 3)
    assert len(orders) > 1


# -- hypothesis-guided mode -----------------------------------------------------------------


def test_screening_empty_graph_shares():
    s, t = empty_pair([0.0, 0.0, 0.0], [1.0, 2.0, 2.0])
    p = InterventionProblem(s, t, (0, 1, 2))
    rep = screen_single_targets(p, (0, 1, 2))
    np.testing.assert_allclose([rep.single_scores[i] for i in range(3)], [100 / 9, 400 / 9, 400 / 9], atol=1e-6)
    np.testing.assert_allclose([rep.single_alphas[i] for i in range(3)], [1.0, 2.0, 2.0], atol=1e-6)


def test_screening_chain_root_and_unrelated_node():
    s, t = chain_pair()
    names = s.node_names + ("iso",)
    dag = Dag(names, s.dag.edges)
    W = np.zeros((5, 5))
    W[:4, :4] = s.weights
    s2 = scm_from_weights(dag, W, [0.0] * 5)
    t2 = scm_from_weights(dag, W, [2.0] + [0.0] * 4)
    rep = screen_single_targets(InterventionProblem(s2, t2, tuple(range(5))), tuple(range(5)))
    assert rep.single_scores[0] > 99
    assert rep.single_scores[4] == pytest.approx(0.0, abs=1e-6)


def test_rank_subsets_mean_example():
    ranked, notes = rank_subsets({0: 0.9, 1: 0.8, 2: 0.1}, 2, ("a", "b", "c"))
    assert ranked[0][0] == (0, 1) and ranked[0][1] == pytest.approx(0.85)
    assert [m for _, m in ranked] == sorted((m for _, m in ranked), reverse=True)
    assert notes == []


def test_rank_subsets_cap_restricts_pool():
    scores = {i: float(i) for i in range(40)}
    ranked, notes = rank_subsets(scores, 3, tuple(f"n{i:02d}" for i in range(40)), cap=1000)
    assert notes and all(set(s) <= set(range(40 - 30, 40)) for s, _ in ranked)
    assert len(ranked) <= 1000


def test_prioritize_k1_is_best_single(rng):
    s, t = random_linear_pair(rng, q=5)
    p = InterventionProblem(s, t, tuple(range(5)), mc_n=2000)
    best, rep = prioritize_and_solve(p, range(5), 1)
    top = max(rep.single_scores, key=lambda i: rep.single_scores[i])
    assert best.support in ((top,), ())
    assert best.transition_pct == pytest.approx(rep.single_scores[top], abs=1e-9)


def test_prioritize_saturates_in_top_m(rng):
    s, t = random_linear_pair(rng, q=4)
    p = InterventionProblem(s, t, tuple(range(4)), mc_n=2000)
    a, rep = prioritize_and_solve(p, range(4), 2, top_m=6)
    b, _ = prioritize_and_solve(p, range(4), 2, top_m=50)
    np.testing.assert_array_equal(a.alpha, b.alpha)
    assert a.candidates == b.candidates
    assert len(rep.ranked_subsets) == 6
    with pytest.raises(ValidationError):
        prioritize_and_solve(p, range(4), 5)
