"""Causal shift attribution and sparse intervention design between two states."""

from .attribution import AttributionConfig, AttributionReport, attribute, shapley_attributions
from .bench import BenchConfig, BenchResult, run_benchmark
from .data import Dataset, StatePair, load_dataset, standardize
from .errors import CoastError, ConvergenceError, ValidationError
from .featsel import SelectionConfig, SelectionReport, bh_adjust, run_selection
from .graph import Dag, DiscoveryConfig, discover_shared_backbone, falsify
from .optimize import (
    InterventionProblem,
    RegPath,
    Solution,
    persistence,
    problem_grid,
    rank_targets,
    solve,
    solve_path,
    transition_percentage,
)
from .scm import Scm, ShiftIntervention, fit_scm, post_intervention_mean, sample, sample_shift

__version__ = "0.1.0"

__all__ = [
    "AttributionConfig", "AttributionReport", "attribute", "shapley_attributions",
    "BenchConfig", "BenchResult", "run_benchmark",
    "Dataset", "StatePair", "load_dataset", "standardize",
    "CoastError", "ConvergenceError", "ValidationError",
    "SelectionConfig", "SelectionReport", "bh_adjust", "run_selection",
    "Dag", "DiscoveryConfig", "discover_shared_backbone", "falsify",
    "InterventionProblem", "RegPath", "Solution", "persistence", "problem_grid",
    "rank_targets", "solve", "solve_path", "transition_percentage",
    "Scm", "ShiftIntervention", "fit_scm", "post_intervention_mean", "sample", "sample_shift",
]
