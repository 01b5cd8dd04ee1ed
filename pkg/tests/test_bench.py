import json

import numpy as np
import pytest

from coast.attribution import significant_shift_set
from coast.bench import (
    BenchConfig,
    avg_tp,
    generate_ground_truth,
    generate_pair,
    match_solution,
    mda_rank,
    mda_tp_matched,
    recall_at_k,
    results_csv,
    run_benchmark,
    run_seed,
    tp_at_k,
)
from coast.errors import ValidationError
from coast.optimize import RegPath, Solution
from coast.scm import fit_scm

from conftest import make_pair


def sol(support, q=10, tp=50.0):
    alpha = np.zeros(q)
    alpha[list(support)] = 1.0
    names = tuple(f"n{i}" for i in range(q))
    return Solution(1.0, alpha, tuple(range(q)), names, tp, 0.0, 0.0, {}, True, 1)


# -- generator ------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValidationError):
        BenchConfig(q=0)
    with pytest.raises(ValidationError):
        BenchConfig(q=5, k_true=6)
    with pytest.raises(ValidationError):
        BenchConfig(graph_mode="file")
    assert BenchConfig(q=100).p_edge == pytest.approx(0.04)


def test_empty_dag_nodes_independent():
    cfg = BenchConfig(q=10, k_true=0, sigma=3.0, edge_prob=0.0)
    gt = generate_ground_truth(cfg, 0)
    assert gt.dag.edges == frozenset()
    X = generate_pair(gt, cfg, 0, raw=True).source.values
    np.testing.assert_allclose(X.std(axis=0), 3.0, rtol=0.05)
    np.testing.assert_allclose(X.mean(axis=0), 0.0, atol=4 * 3.0 / np.sqrt(cfg.n_samples))
    corr = np.corrcoef(X.T) - np.eye(10)
    assert np.abs(corr).max() < 0.06


def test_ground_truth_deterministic():
    cfg = BenchConfig(q=20, k_true=5)
    a, b = generate_ground_truth(cfg, 3), generate_ground_truth(cfg, 3)
    assert a.dag == b.dag and a.true_targets == b.true_targets and a.do_values == b.do_values
    np.testing.assert_array_equal(a.scm.weights, b.scm.weights)
    assert len(set(a.true_targets)) == 5
    c = generate_ground_truth(cfg, 4)
    assert (c.dag, c.true_targets) != (a.dag, a.true_targets)


def test_mean_in_degree_q100():
    cfg = BenchConfig(q=100)
    degrees = [len(generate_ground_truth(cfg, s).dag.edges) / 100 for s in range(5)]
    assert abs(np.mean(degrees) - 100 * cfg.p_edge / 2) <= 1


def test_coefficients_and_do_values_in_range():
    cfg = BenchConfig(q=30, k_true=10, sigma=2.0)
    gt = generate_ground_truth(cfg, 1)
    w = np.abs(gt.scm.weights[gt.scm.weights != 0])
    assert np.all((w >= 0.5) & (w <= 2.0))
    d = np.abs(gt.do_values)
    assert np.all((d >= 4.0) & (d <= 10.0))


def test_targets_are_constant_and_pair_is_standardized():
    cfg = BenchConfig(q=10, k_true=3, n_samples=500)
    gt = generate_ground_truth(cfg, 2)
    raw = generate_pair(gt, cfg, 2, raw=True)
    for t, v in gt.interventions.items():
        assert np.all(raw.target.values[:, t] == v)
    pooled = generate_pair(gt, cfg, 2).pooled().values
    np.testing.assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(pooled.std(axis=0), 1.0, atol=1e-10)


def test_child_mean_follows_do_value():
    cfg = BenchConfig(q=10, k_true=1, n_samples=20_000)
    for seed in range(40):
        gt = generate_ground_truth(cfg, seed)
        t = gt.true_targets[0]
        children = np.flatnonzero(gt.scm.weights[t])
        if children.size:
            break
    c = children[0]
    raw = generate_pair(gt, cfg, seed, raw=True)
    shift = raw.target.values[:, c].mean() - raw.source.values[:, c].mean()
    prior = gt.scm.model_mean()[t]
    expected = gt.scm.weights[t, c] * (gt.do_values[0] - prior)
    sd = np.sqrt(raw.target.values[:, c].var() / cfg.n_samples + raw.source.values[:, c].var() / cfg.n_samples)
    assert abs(shift - expected) <= 4 * sd


def test_no_targets_no_shift():
    cfg = BenchConfig(q=10, k_true=0)
    hits = 0
    for seed in range(5):
        pair = generate_pair(generate_ground_truth(cfg, seed), cfg, seed)
        hits += bool(significant_shift_set(pair))
    # BH at 5% gives a chance discovery in roughly one draw in twenty
    assert hits <= 1


# -- metrics --------------------------------------------------------------------------------


def test_mda_rank_examples():
    pair = make_pair([[0.0, 0.0, 0.0]], [[3.0, 1.0, 0.0]])
    assert [j for j, _ in mda_rank(pair)] == [0, 1, 2]
    pair = make_pair([[0.0, 0.0, 0.0]], [[0.0, 0.0, 2.0]])
    assert mda_rank(pair)[0] == (2, 2.0)
    same = make_pair([[1.0, 2.0, 3.0]], [[1.0, 2.0, 3.0]])
    assert mda_rank(same) == [(0, 0.0), (1, 0.0), (2, 0.0)]


def test_recall_examples():
    assert recall_at_k([3, 1, 2], {1, 3}, 2) == 1.0
    assert recall_at_k([0, 4], {1, 3}, 2) == 0.0
    assert recall_at_k([1, 2, 3, 4, 9, 5], {1, 2, 3, 4, 5}, 5) == pytest.approx(0.8)
    with pytest.raises(ValidationError):
        recall_at_k([1], {1, 2}, 2)


def test_tp_at_k_rules():
    path = RegPath([sol([]), sol([1, 2], tp=70), sol([1, 2, 3], tp=80), sol([0, 1, 2, 3, 4], tp=98)])
    assert tp_at_k(path, 5) == 98.0
    assert match_solution(path, 5) == (path.solutions[3], False)
    gaps = RegPath([sol([], tp=0), sol([1, 2, 3], tp=60), sol(range(7), tp=90)])
    picked, flagged = match_solution(gaps, 5)
    assert len(picked.support) == 3 and flagged
    picked, flagged = match_solution(gaps, 9)
    assert len(picked.support) == 7 and flagged


def test_tp_at_k_uses_refit_when_asked():
    s = sol([1], tp=40)
    s.refit_transition_pct = 90.0
    path = RegPath([sol([]), s])
    assert tp_at_k(path, 1) == 40.0
    assert tp_at_k(path, 1, refit=True) == 90.0


def test_avg_tp_rules():
    assert avg_tp(RegPath([sol([]), sol([1], tp=90), sol([1, 2], tp=100)])) == 95.0
    assert avg_tp(RegPath([sol([4], tp=33.0)])) == 33.0
    # repeated supports count once, at their best value
    assert avg_tp(RegPath([sol([1], tp=80), sol([1], tp=90), sol([2], tp=50)])) == 70.0
    with pytest.raises(ValidationError):
        avg_tp(RegPath([sol([]), sol([])]))


def test_mda_matched_full_size_on_empty_graph():
    cfg = BenchConfig(q=5, k_true=5, edge_prob=0.0, n_samples=1000)
    gt = generate_ground_truth(cfg, 0)
    pair = generate_pair(gt, cfg, 0)
    scm_s = fit_scm(gt.dag, pair.source)
    scm_t = fit_scm(gt.dag, pair.target, reference=scm_s)
    out = mda_tp_matched(pair, scm_s, scm_t, [1, 3, 5], mc_n=2000)
    assert sorted(out) == [1, 3, 5]
    assert out[5] > 99
    assert out[1] <= out[3] <= out[5]


# -- runs -------------------------------------------------------------------------------------


def test_seed_run_metric_ranges():
    cfg = BenchConfig(q=10, k_true=2, seeds=(0,), mc_n=4000, n_samples=2000)
    r = run_seed(cfg, 0)
    for m in ("coast", "mda"):
        assert 0 <= r.metrics[m]["recall_at_k"] <= 1
        assert r.metrics[m]["tp_at_k"] <= 100 and r.metrics[m]["avg_tp"] <= 100
    assert len(r.true_targets) == 2
    assert r.path_sizes[0] == 0


def test_empty_graph_all_targets_densest_solution():
    cfg = BenchConfig(q=6, k_true=6, edge_prob=0.0, seeds=(0,), mc_n=4000, n_samples=2000)
    r = run_seed(cfg, 0)
    assert 6 in r.path_sizes
    assert r.metrics["coast"]["tp_at_k"] >= 99


def test_benchmark_is_deterministic_and_exports():
    cfg = BenchConfig(q=8, k_true=1, seeds=(0, 1), mc_n=2000, n_samples=1000, theta=10)
    a, b = run_benchmark(cfg), run_benchmark(cfg)
    assert a.to_json(timing=False) == b.to_json(timing=False)
    d = json.loads(a.to_json())
    assert set(d) == {"config", "aggregate", "per_seed"}
    assert "runtime" in d["per_seed"][0]
    lines = results_csv([a]).splitlines()
    assert lines[0] == "metric,q,k,sigma,method,mean,per_seed"
    assert len(lines) == 1 + 6


def test_learned_graph_mode_runs():
    cfg = BenchConfig(q=6, k_true=1, seeds=(0,), graph_mode="learned", mc_n=2000, n_samples=1000, theta=8)
    r = run_seed(cfg, 0)
    assert 0 <= r.metrics["coast"]["recall_at_k"] <= 1
