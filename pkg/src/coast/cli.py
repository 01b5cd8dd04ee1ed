"""Command-line pipeline: each stage as a subcommand plus the end-to-end ``run``.

Every command writes into one output directory and finishes with a
``manifest.json`` that lists each artifact with its sha256, the resolved
configuration (defaults included) and the stage seeds.  Stage seeds come from
the master seed through labeled derivation, so a rerun with the same seed
reproduces every artifact byte for byte.

Exit codes: 0 ok, 2 usage or validation error, 1 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import _rng
from .attribution import AttributionConfig, attribute
from .bench import BenchConfig, results_csv, run_benchmark
from .data import SOURCE, TARGET, StatePair, load_dataset, standardize, summary_records
from .errors import ValidationError
from .featsel import SelectionConfig, run_selection
from .graph import DiscoveryConfig, discover_shared_backbone, edge_list_csv, falsify, load_dag, read_edge_list
from .optimize import (
    InterventionProblem,
    persistence,
    prioritize_and_solve,
    problem_grid,
    rank_targets,
    solve_path,
    weights_from_attributions,
)
from .scm import fit_scm

SCHEMA_VERSION = 1

QUICK = {"q": [10], "k": [1, 5, 10], "sigma": [1.0, 3.0, 5.0]}


# -- configuration -----------------------------------------------------------


@dataclasses.dataclass
class GraphSettings:
    # "learned": hill-climbing on both states; "file": edge list or JSON graph
    mode: str = "learned"
    path: str | None = None
    required: str | None = None
    forbidden: str | None = None
    falsify_significance: float = 0.05

    def __post_init__(self):
        if self.mode not in ("learned", "file"):
            raise ValidationError(f"graph.mode must be 'learned' or 'file', got {self.mode!r}")
        if self.mode == "file" and not self.path:
            raise ValidationError("graph.mode 'file' needs graph.path")
        if not 0 < self.falsify_significance < 1:
            raise ValidationError("graph.falsify_significance must be in (0, 1)")


@dataclasses.dataclass
class OptimizeSettings:
    gamma: float = 0.0
    rc_bound: float | None = None
    box: tuple[float | None, float | None] | None = None
    epsilon: float = 1e-3
    theta: int = 30
    actionable: tuple[str, ...] | None = None
    mean_method: str = "auto"
    mc_n: int = 20_000


@dataclasses.dataclass
class ScreenSettings:
    k: int = 2
    top_m: int = 10


@dataclasses.dataclass
class BenchGrid:
    # unset axes fall back to the single value in the bench section
    q: tuple[int, ...] | None = None
    k: tuple[int, ...] | None = None
    sigma: tuple[float, ...] | None = None

    def axes(self, base: BenchConfig) -> dict:
        return {
            "q": self.q or (base.q,),
            "k": self.k or (base.k_true,),
            "sigma": self.sigma or (base.sigma,),
        }


@dataclasses.dataclass
class RunConfig:
    source: str | None = None
    target: str | None = None
    output_dir: str = "coast_out"
    seed: int = 0
    standardize: bool = True
    featsel_enabled: bool = True
    noise_kind: str = "gaussian"
    selection: SelectionConfig = dataclasses.field(default_factory=SelectionConfig)
    discovery: DiscoveryConfig = dataclasses.field(default_factory=DiscoveryConfig)
    graph: GraphSettings = dataclasses.field(default_factory=GraphSettings)
    attribution: AttributionConfig = dataclasses.field(default_factory=AttributionConfig)
    optimize: OptimizeSettings = dataclasses.field(default_factory=OptimizeSettings)
    screen: ScreenSettings = dataclasses.field(default_factory=ScreenSettings)
    bench: BenchConfig | None = None
    bench_grid: BenchGrid = dataclasses.field(default_factory=BenchGrid)


_NESTED = {
    "selection": SelectionConfig,
    "discovery": DiscoveryConfig,
    "graph": GraphSettings,
    "attribution": AttributionConfig,
    "optimize": OptimizeSettings,
    "screen": ScreenSettings,
    "bench": BenchConfig,
    "bench_grid": BenchGrid,
}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ValidationError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ValidationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kw = {}
    for key, val in raw.items():
        if cls is BenchConfig and key in ("attribution", "discovery"):
            val = _build(AttributionConfig if key == "attribution" else DiscoveryConfig, val, f"{where}.{key}")
        elif isinstance(val, list):
            val = tuple(tuple(v) if isinstance(v, list) else v for v in val)
        kw[key] = val
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid {where}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    raw = dict(raw)
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    kw = {}
    for key, val in raw.items():
        if key in _NESTED and val is not None:
            kw[key] = _build(_NESTED[key], val, key)
        else:
            kw[key] = val
    return _build(RunConfig, kw, "config")


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (frozenset, set)):
        return sorted(_plain(x) for x in obj)
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    d = _plain(cfg)
    if cfg.bench is not None:
        d["bench"] = _plain(cfg.bench.to_dict())
    return {"schema_version": SCHEMA_VERSION, **d}


# -- output ------------------------------------------------------------------


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.cause = exc


class Output:
    """Writes artifacts into one directory and keeps their hashes."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ValidationError(f"cannot create output directory {self.root}: {exc}") from exc
        if not self.root.is_dir() or not os.access(self.root, os.W_OK | os.X_OK):
            raise ValidationError(f"output directory {self.root} is not writable")
        self.files: dict[str, str] = {}

    def write(self, name: str, text: str) -> None:
        if Path(name).is_absolute() or ".." in Path(name).parts:
            raise ValidationError(f"artifact name must stay inside the output directory: {name}")
        data = text.encode("utf-8")
        (self.root / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def json(self, name: str, obj: Any) -> None:
        self.write(name, json.dumps(_plain(obj), indent=2, sort_keys=False) + "\n")

    def manifest(self, command: str, cfg: RunConfig, seeds: dict[str, int], status: str,
                 inputs: dict[str, str], error: str | None = None) -> None:
        body = {
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "status": status,
            "error": error,
            "master_seed": cfg.seed,
            "stage_seeds": seeds,
            "inputs": inputs,
            # the output directory is left out so relocated reruns hash identically
            "config": {k: v for k, v in config_to_dict(cfg).items() if k != "output_dir"},
            "artifacts": [{"file": k, "sha256": v} for k, v in sorted(self.files.items())],
        }
        data = (json.dumps(body, indent=2) + "\n").encode("utf-8")
        (self.root / "manifest.json").write_bytes(data)


def _sha256_file(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- pipeline ----------------------------------------------------------------

STAGES = ("select", "discover", "fit", "attribute", "optimize", "screen")
SEED_LABELS = {
    "discover": "cli.discover",
    "attribute": "cli.attribute",
    "optimize": "cli.optimize",
    "rank": "cli.rank",
}


class Pipeline:
    def __init__(self, cfg: RunConfig, out: Output):
        self.cfg = cfg
        self.out = out
        self.seeds = {k: _rng.derive_seed(cfg.seed, v) for k, v in SEED_LABELS.items()}
        self.pair: StatePair | None = None
        self.selection = None
        self.dag = None
        self.scm_s = self.scm_t = None
        self.report = None
        self.problem = None

    def _stage(self, name: str, fn: Callable[[], None]) -> None:
        try:
            fn()
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            raise StageError(name, exc) from exc

    # each step depends on the previous ones having run
    def load(self) -> None:
        cfg = self.cfg
        if not cfg.source or not cfg.target:
            raise ValidationError("source and target CSV paths are required")
        src = load_dataset(cfg.source, SOURCE)
        tgt = load_dataset(cfg.target, TARGET)
        pair = StatePair(src, tgt)
        self.pair = standardize(pair) if cfg.standardize else pair
        self.out.json("data_summary.json", {
            SOURCE: summary_records(src),
            TARGET: summary_records(tgt),
        })

    def select(self) -> None:
        rep = run_selection(self.pair, self.cfg.selection)
        self.selection = rep
        self.out.write("selection.json", rep.to_json() + "\n")
        self.out.write("hybrid_scores.csv", rep.hybrid_csv())

    def _working_pair(self) -> StatePair:
        pair = self.pair
        if self.cfg.featsel_enabled and self.selection is not None:
            keep = self.selection.names(sorted(self.selection.refined_set))
            if not keep:
                raise ValidationError("feature selection kept no features")
            pair = StatePair(pair.source.subset(keep), pair.target.subset(keep), pair.standardizer)
        return pair

    def discover(self) -> None:
        g = self.cfg.graph
        # a supplied graph fixes the variable set, so feature selection only reports
        pair = self.pair if g.mode == "file" else self._working_pair()
        required = read_edge_list(g.required) if g.required else set()
        forbidden = read_edge_list(g.forbidden) if g.forbidden else set()
        if g.mode == "file":
            dag = load_dag(g.path, required, forbidden)
            missing = sorted(set(dag.node_names) - set(pair.feature_names))
            if missing:
                raise ValidationError(f"graph nodes not in data: {', '.join(missing)}")
            pair = StatePair(pair.source.subset(dag.node_names), pair.target.subset(dag.node_names),
                             pair.standardizer)
        else:
            dag = discover_shared_backbone([pair.source, pair.target], self.cfg.discovery,
                                           required, forbidden, seed=self.seeds["discover"])
        self.dag = dag
        self.work = pair
        self.out.write("dag.json", dag.to_json() + "\n")
        self.out.write("edges.csv", edge_list_csv(dag.edges))
        fal = {
            SOURCE: falsify(dag, pair.source, g.falsify_significance).to_dict(),
            TARGET: falsify(dag, pair.target, g.falsify_significance).to_dict(),
        }
        self.out.json("falsification.json", fal)

    def fit(self) -> None:
        kind = self.cfg.noise_kind
        self.scm_s = fit_scm(self.dag, self.work.source, kind, SOURCE)
        self.scm_t = fit_scm(self.dag, self.work.target, kind, TARGET, reference=self.scm_s)
        self.out.write("scm_source.json", self.scm_s.to_json() + "\n")
        self.out.write("scm_target.json", self.scm_t.to_json() + "\n")

    def attribute(self) -> None:
        rep = attribute(self.work, self.scm_s, self.scm_t, self.cfg.attribution, seed=self.seeds["attribute"])
        self.report = rep
        self.out.write("attribution.json", rep.to_json() + "\n")
        self.out.write("psi.csv", rep.psi_csv())
        if not rep.selected_candidates:
            raise ValidationError("attribution selected no candidate targets")

    def _problem(self) -> InterventionProblem:
        o = self.cfg.optimize
        rep = self.report
        cand = tuple(rep.selected_candidates)
        names = self.scm_s.node_names
        act = None
        if o.actionable is not None:
            unknown = sorted(set(o.actionable) - set(names))
            if unknown:
                raise ValidationError(f"actionable nodes not in graph: {', '.join(unknown)}")
            act = tuple(i for i in cand if names[i] in set(o.actionable))
        return InterventionProblem(
            self.scm_s, self.scm_t, cand, actionable=act,
            weights=weights_from_attributions(rep.u[list(cand)]),
            gamma=o.gamma, box=o.box, rc_bound=o.rc_bound,
            xbar_source=self.work.source.values.mean(axis=0),
            xbar_target=self.work.target.values.mean(axis=0),
            mean_method=o.mean_method, mc_n=o.mc_n, mc_seed=self.seeds["optimize"],
        )

    def optimize(self) -> None:
        o = self.cfg.optimize
        self.problem = problem = self._problem()
        grid = problem_grid(problem, o.epsilon, o.theta)
        if not grid.values:
            raise ValidationError(f"empty lambda grid: {grid.reason}")
        path = solve_path(problem, grid)
        names = problem.node_names
        self.out.write("path.json", path.to_json() + "\n")
        self.out.write("path_table.csv", path.table_csv())
        self.out.write("heatmap.csv", path.heatmap_csv())
        pers = persistence(path)
        self.out.json("persistence.json", pers.to_dict())
        order = rank_targets(path, self.report.u, self.seeds["rank"])
        self.out.json("rankings.json", [
            {"rank": r + 1, "target": names[i], "persistence": pers.target_persistence.get(i, 0.0),
             "u": float(self.report.u[i])}
            for r, i in enumerate(order)
        ])

    def screen(self) -> None:
        s = self.cfg.screen
        problem = self.problem or self._problem()
        z = problem.candidates
        k = min(s.k, len(z))
        best, rep = prioritize_and_solve(problem, z, k, s.top_m)
        self.out.json("screening.json", {**rep.to_dict(), "best": best.to_dict()})

    def run(self, upto: str) -> None:
        steps = [("load", self.load)]
        if self.cfg.featsel_enabled or upto == "select":
            steps.append(("select", self.select))
        steps += [("discover", self.discover), ("fit", self.fit), ("attribute", self.attribute)]
        if upto == "run":
            steps += [("optimize", self.optimize), ("screen", self.screen)]
        elif upto == "screen":
            steps.append(("screen", self.screen))
        elif upto == "optimize":
            steps.append(("optimize", self.optimize))
        last = {"select": "select", "discover": "discover", "fit": "fit"}.get(upto)
        for name, fn in steps:
            self._stage(name, fn)
            if name == last:
                break


def run_bench(cfg: RunConfig, out: Output, quick: bool) -> None:
    base = cfg.bench or BenchConfig()
    grid = QUICK if quick else cfg.bench_grid.axes(base)
    results = []
    for q in grid["q"]:
        for k in grid["k"]:
            for sigma in grid["sigma"]:
                cell = dataclasses.replace(base, q=int(q), k_true=int(k), sigma=float(sigma))
                res = run_benchmark(cell)
                results.append(res)
                out.write(f"bench_q{q}_k{k}_sigma{float(sigma):g}.json", res.to_json(timing=False) + "\n")
                total = sum(sum(r.runtime.values()) for r in res.per_seed)
                agg = res.aggregate
                print(f"q={q} k={k} sigma={sigma:g}: coast recall={agg['coast']['recall_at_k']:.3f} "
                      f"mda recall={agg['mda']['recall_at_k']:.3f} ({total:.1f}s)", file=sys.stderr)
    out.write("bench.csv", results_csv(results))


# -- argument handling ---------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coast", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--source", help="source-state CSV")
    data.add_argument("--target", help="target-state CSV")
    data.add_argument("--graph", help="edge-list CSV or JSON graph; skips discovery")
    data.add_argument("--no-featsel", action="store_true", help="skip feature selection")
    help_text = {
        "select": "feature selection",
        "discover": "shared-backbone discovery and falsification",
        "fit": "fit source and target SCMs",
        "attribute": "Shapley mechanism attribution",
        "optimize": "regularization path, persistence and target ranking",
        "screen": "hypothesis-guided fixed-cardinality design",
        "run": "full pipeline, or the benchmark when the config has a bench section",
    }
    for name, text in help_text.items():
        sp = sub.add_parser(name, parents=[common, data], help=text)
        if name == "screen":
            sp.add_argument("--k", type=int, help="number of targets")
    b = sub.add_parser("bench", parents=[common], help="synthetic benchmark")
    b.add_argument("--quick", action="store_true", help="q=10, every k and sigma, 5 seeds")
    b.add_argument("--q", type=int, nargs="+")
    b.add_argument("--k", type=int, nargs="+")
    b.add_argument("--sigma", type=float, nargs="+")
    b.add_argument("--seeds", type=int, nargs="+")
    b.add_argument("--graph-mode", choices=("oracle", "learned"))
    return p


def _resolve(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ValidationError(f"missing config file: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
        cfg = config_from_dict(raw)
    else:
        cfg = RunConfig()
    if args.out:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.command == "bench":
        bench = cfg.bench or BenchConfig()
        kw = {}
        if args.seeds:
            kw["seeds"] = tuple(args.seeds)
        if args.graph_mode:
            kw["graph_mode"] = args.graph_mode
        cfg.bench = dataclasses.replace(bench, **kw)
        g = cfg.bench_grid
        cfg.bench_grid = BenchGrid(
            tuple(args.q) if args.q else g.q,
            tuple(args.k) if args.k else g.k,
            tuple(args.sigma) if args.sigma else g.sigma,
        )
    if cfg.bench is not None:
        axes = cfg.bench_grid.axes(cfg.bench)
        for q in axes["q"]:
            if q < 1:
                raise ValidationError(f"q must be a positive integer, got {q}")
        for q in axes["q"]:
            for k in axes["k"]:
                for s in axes["sigma"]:
                    dataclasses.replace(cfg.bench, q=q, k_true=k, sigma=s)
    if args.command == "bench":
        return cfg
    if args.source:
        cfg.source = args.source
    if args.target:
        cfg.target = args.target
    if args.graph:
        cfg.graph = dataclasses.replace(cfg.graph, mode="file", path=args.graph)
    if args.no_featsel:
        cfg.featsel_enabled = False
    if getattr(args, "k", None) is not None:
        cfg.screen = dataclasses.replace(cfg.screen, k=args.k)
    for label, path in (("source", cfg.source), ("target", cfg.target), ("graph", cfg.graph.path),
                        ("required edges", cfg.graph.required), ("forbidden edges", cfg.graph.forbidden)):
        if path and not Path(path).is_file():
            raise ValidationError(f"missing {label} file: {path}")
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        out = Output(cfg.output_dir)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    command = args.command
    is_bench = command == "bench" or (command == "run" and cfg.bench is not None and not cfg.source)
    inputs = {}
    pipe = None
    try:
        if is_bench:
            run_bench(cfg, out, quick=getattr(args, "quick", False))
            seeds = {}
        else:
            pipe = Pipeline(cfg, out)
            seeds = pipe.seeds
            pipe.run(command)
            inputs = {k: _sha256_file(p) for k, p in (("source", cfg.source), ("target", cfg.target))}
    except (StageError, ValidationError) as exc:
        cause = exc.cause if isinstance(exc, StageError) else exc
        code = 2 if isinstance(cause, ValidationError) else 1
        out.manifest(command, cfg, pipe.seeds if pipe else {}, "failed", inputs, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return code
    except Exception as exc:  # noqa: BLE001
        out.manifest(command, cfg, pipe.seeds if pipe else {}, "failed", inputs, repr(exc))
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 1
    out.manifest(command, cfg, seeds, "ok", inputs)
    print(f"wrote {len(out.files) + 1} files to {out.root}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
