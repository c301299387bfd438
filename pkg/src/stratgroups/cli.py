"""Command-line pipeline: end-to-end runs from a config file plus
per-stage subcommands that consume and produce the documented file
formats.

All randomness flows from one mandatory master seed through named
substreams, so rerunning a config reproduces byte-identical numeric
CSVs regardless of the worker-thread count. Every output is written via
a temp file and an atomic rename.

Exit codes: 0 success; 1 usage/config; 2 data stage; 3 forest/tune
stage; 4 interpret stage; 5 cluster stage; 6 stats stage; 7 profile
stage; 8 bench stage.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__, bench, cluster, data, forest, interpret, profile, stats
from .fileio import atomic_writer
from .rng import child_seed

logger = logging.getLogger(__name__)

STAGE_EXIT_CODES = {
    "config": 1,
    "data": 2,
    "forest": 3,
    "tune": 3,
    "interpret": 4,
    "cluster": 5,
    "stats": 6,
    "profile": 7,
    "bench": 8,
}

OUTPUT_ROOT_ENV = "STRATGROUPS_OUT"


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@dataclass(frozen=True)
class SynthSpec:
    n_banks: int = 500
    n_years: int = 10
    k_planted: int = 3
    noise_sd: float = 0.002
    ratio_sd: float = 0.02
    start_year: int = 2000


@dataclass(frozen=True)
class TuneSpec:
    enabled: bool = False
    mtry_range: tuple[int, ...] = (1, 3, 5, 7, 9)
    min_node_range: tuple[int, ...] = (1, 5, 25)
    n_trees: int = 100


@dataclass(frozen=True)
class BenchSpec:
    enabled: bool = False
    mode: str = "in_sample"
    knn_k: int = 5
    rf_trees: int = 100
    gb_stages: int = 200
    gb_shrinkage: float = 0.1
    gb_depth: int = 3


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str
    input_kind: str = "synth"           # "synth" or "csv"
    input_path: str | None = None
    schema: dict[str, str] = field(default_factory=dict)
    synth: SynthSpec = SynthSpec()
    outliers_enabled: bool = True
    lower_q: float = 0.005
    upper_q: float = 0.995
    periods: tuple[data.PeriodSpec, ...] = ()
    n_trees: int = 500
    mtry: int = 3
    min_node_size: int = 1
    max_depth: int | None = None
    bootstrap_size: int | None = None
    k_min: int = 2
    k_max: int = 10
    n_starts: int = 100
    standardize: bool = False
    indices: tuple[str, ...] = cluster.INDEX_NAMES
    alpha: float = 0.10
    importance_scaling: str = "minmax"
    transition_ranking: str = "whole_sample"
    min_period_records: int = 200
    kmeans_max_iter: int = 300
    tune: TuneSpec = TuneSpec()
    bench: BenchSpec = BenchSpec()
    threads: int = 1

    def forest_config(self) -> forest.ForestConfig:
        return forest.ForestConfig(
            n_trees=self.n_trees,
            mtry=self.mtry,
            min_node_size=self.min_node_size,
            max_depth=self.max_depth,
            seed=child_seed(self.seed, "forest"),
            bootstrap_size=self.bootstrap_size,
        )

    def pipeline_config(self) -> profile.PipelineConfig:
        return profile.PipelineConfig(
            forest=self.forest_config(),
            k_min=self.k_min,
            k_max=self.k_max,
            n_starts=self.n_starts,
            cluster_seed=child_seed(self.seed, "kmeans"),
            standardize=self.standardize,
            indices=self.indices,
            alpha=self.alpha,
            importance_scaling=self.importance_scaling,
            transition_ranking=self.transition_ranking,
            min_period_records=self.min_period_records,
            kmeans_max_iter=self.kmeans_max_iter,
            threads=self.threads,
        )

    def synth_config(self) -> data.SynthConfig:
        return data.SynthConfig(
            n_banks=self.synth.n_banks,
            n_years=self.synth.n_years,
            k_planted=self.synth.k_planted,
            noise_sd=self.synth.noise_sd,
            ratio_sd=self.synth.ratio_sd,
            start_year=self.synth.start_year,
            seed=self.seed,
        )


def _take(raw: dict, section: str) -> dict:
    value = raw.get(section) or {}
    if not isinstance(value, dict):
        raise StageError("config", f"section {section!r} must be a mapping")
    return value


def load_config(path: str | Path, seed_override: int | None = None,
                out_override: str | None = None, threads_override: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise StageError("config", f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise StageError("config", "config root must be a mapping")
    try:
        seed = seed_override if seed_override is not None else raw.get("seed")
        if seed is None:
            raise StageError("config", "a master seed is mandatory (set 'seed' or pass --seed)")
        out_dir = out_override or raw.get("out_dir")
        if out_dir is None:
            root = os.environ.get(OUTPUT_ROOT_ENV)
            if root is None:
                raise StageError("config", "no output directory (set 'out_dir', --out, or $" + OUTPUT_ROOT_ENV + ")")
            out_dir = str(Path(root) / path.stem)
        inp = _take(raw, "input")
        synth_spec = SynthSpec(**_take(inp, "synth")) if "synth" in inp or inp.get("kind", "synth") == "synth" else SynthSpec()
        outliers = _take(raw, "outliers")
        periods = tuple(
            data.PeriodSpec(str(p["label"]), int(p["year_min"]), int(p["year_max"]))
            for p in raw.get("periods") or ()
        )
        forest_raw = _take(raw, "forest")
        cluster_raw = _take(raw, "cluster")
        tune_raw = _take(raw, "tune")
        bench_raw = _take(raw, "bench")
        cfg = RunConfig(
            seed=int(seed),
            out_dir=str(out_dir),
            input_kind=str(inp.get("kind", "synth")),
            input_path=inp.get("path"),
            schema={str(k): str(v) for k, v in (inp.get("schema") or {}).items()},
            synth=synth_spec,
            outliers_enabled=bool(outliers.get("enabled", True)),
            lower_q=float(outliers.get("lower_q", 0.005)),
            upper_q=float(outliers.get("upper_q", 0.995)),
            periods=periods,
            n_trees=int(forest_raw.get("n_trees", 500)),
            mtry=int(forest_raw.get("mtry", 3)),
            min_node_size=int(forest_raw.get("min_node_size", 1)),
            max_depth=forest_raw.get("max_depth"),
            bootstrap_size=forest_raw.get("bootstrap_size"),
            k_min=int(cluster_raw.get("k_min", 2)),
            k_max=int(cluster_raw.get("k_max", 10)),
            n_starts=int(cluster_raw.get("n_starts", 100)),
            standardize=bool(cluster_raw.get("standardize", False)),
            indices=tuple(cluster_raw.get("indices", cluster.INDEX_NAMES)),
            alpha=float(raw.get("alpha", 0.10)),
            importance_scaling=str(raw.get("importance_scaling", "minmax")),
            transition_ranking=str(raw.get("transition_ranking", "whole_sample")),
            min_period_records=int(raw.get("min_period_records", 200)),
            kmeans_max_iter=int(cluster_raw.get("max_iter", 300)),
            tune=TuneSpec(
                enabled=bool(tune_raw.get("enabled", False)),
                mtry_range=tuple(tune_raw.get("mtry_range", (1, 3, 5, 7, 9))),
                min_node_range=tuple(tune_raw.get("min_node_range", (1, 5, 25))),
                n_trees=int(tune_raw.get("n_trees", 100)),
            ),
            bench=BenchSpec(
                enabled=bool(bench_raw.get("enabled", False)),
                mode=str(bench_raw.get("mode", "in_sample")),
                knn_k=int(bench_raw.get("knn_k", 5)),
                rf_trees=int(bench_raw.get("rf_trees", 100)),
                gb_stages=int(bench_raw.get("gb_stages", 200)),
                gb_shrinkage=float(bench_raw.get("gb_shrinkage", 0.1)),
                gb_depth=int(bench_raw.get("gb_depth", 3)),
            ),
            threads=int(threads_override if threads_override is not None else raw.get("threads", 1)),
        )
    except StageError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise StageError("config", f"invalid config {path}: {exc}") from exc
    if cfg.input_kind not in ("synth", "csv"):
        raise StageError("config", f"input.kind must be 'synth' or 'csv', got {cfg.input_kind!r}")
    if cfg.input_kind == "csv" and not cfg.input_path:
        raise StageError("config", "input.kind 'csv' requires input.path")
    return cfg


def config_manifest(cfg: RunConfig) -> dict:
    """Full config echo with every default materialized."""
    blob = asdict(cfg)
    blob["periods"] = [
        {"label": p.label, "year_min": p.year_min, "year_max": p.year_max} for p in cfg.periods
    ]
    blob["derived_seeds"] = {
        "forest": child_seed(cfg.seed, "forest"),
        "kmeans": child_seed(cfg.seed, "kmeans"),
        "bench": child_seed(cfg.seed, "bench"),
    }
    blob["versions"] = {
        "stratgroups": __version__,
        "numpy": np.__version__,
        "python": ".".join(map(str, sys.version_info[:3])),
    }
    return blob


# ---------------------------------------------------------------------------
# Stages


def _stage(name: str):
    """Decorator mapping any stage exception to a StageError."""
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, str(exc)) from exc
        return inner
    return wrap


@_stage("data")
def stage_data(cfg: RunConfig, out: Path) -> data.Panel:
    """Acquire (load or synthesize), filter, and echo the panel."""
    if cfg.input_kind == "synth":
        panel, truth = data.synth_generate(cfg.synth_config())
        data.write_ground_truth(truth, out / "ground_truth.csv")
    else:
        result = data.load_panel(cfg.input_path, cfg.schema or None)
        panel = result.panel
        if result.rejected:
            data.write_reject_report(result.rejected, out / "rejects.csv")
    if cfg.outliers_enabled:
        panel, dropped = data.filter_outliers(panel, cfg.lower_q, cfg.upper_q)
        logger.info("outlier filter dropped %d records", dropped)
    if len(panel) == 0:
        raise StageError("data", "no records remain after filtering")
    data.save_panel(panel, out / "panel.csv")
    return panel


@_stage("tune")
def stage_tune(cfg: RunConfig, panel: data.Panel, out: Path) -> None:
    base = replace(cfg.forest_config(), n_trees=cfg.tune.n_trees)
    result = forest.tune_grid(panel, cfg.tune.mtry_range, cfg.tune.min_node_range,
                              base, threads=cfg.threads)
    forest.write_tune_grid_csv(result, out / "tune_grid.csv")


def _write_scope(report: profile.RunReport, scope_dir: Path, cfg: RunConfig) -> None:
    forest.save_forest(report.forest, scope_dir / "forest.txt")
    forest.write_importance_csv(report.importance, scope_dir / "importance.csv")
    interpret.write_contributions_csv(report.contributions, scope_dir / "contributions.csv")
    cluster.write_kselection_csv(report.k_report, scope_dir / "kselection.csv")
    cluster.write_assignments_csv(report.contributions.keys, report.solution.assignments,
                                  scope_dir / "assignments.csv")
    profile.write_table4(report, scope_dir / "table4_panelA.csv", scope_dir / "table4_panelB.csv")
    profile.write_table5(report.models, report.label, scope_dir / "table5.csv", scope_dir / "table5.md")
    profile.write_table6(report.sides, scope_dir / "table6.csv")


@_stage("profile")
def stage_analysis(cfg: RunConfig, panel: data.Panel, out: Path) -> profile.PeriodAnalysis:
    analysis = profile.run_period_analysis(panel, list(cfg.periods), cfg.pipeline_config())
    _write_scope(analysis.whole, out / "whole", cfg)
    for report in analysis.period_reports:
        _write_scope(report, out / "periods" / report.label, cfg)
    profile.write_table10(analysis.transitions, out / "table10.csv")
    return analysis


@_stage("bench")
def stage_bench(cfg: RunConfig, panel: data.Panel, out: Path) -> None:
    seed = child_seed(cfg.seed, "bench")
    result = bench.run_benchmark(
        panel,
        mode=cfg.bench.mode,
        seed=seed,
        rf_cfg=forest.ForestConfig(n_trees=cfg.bench.rf_trees, mtry=cfg.mtry,
                                   min_node_size=cfg.min_node_size, seed=child_seed(cfg.seed, "bench", "rf")),
        knn_k=cfg.bench.knn_k,
        gb_cfg=bench.GBConfig(n_stages=cfg.bench.gb_stages, shrinkage=cfg.bench.gb_shrinkage,
                              tree_depth=cfg.bench.gb_depth, seed=child_seed(cfg.seed, "bench", "gb")),
        threads=cfg.threads,
    )
    bench.write_table2_csv(result, out / "table2.csv")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_run(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel = stage_data(cfg, out)
    if cfg.tune.enabled:
        stage_tune(cfg, panel, out)
    stage_analysis(cfg, panel, out)
    if cfg.bench.enabled:
        stage_bench(cfg, panel, out)
    with atomic_writer(out / "manifest.json") as fh:
        json.dump(config_manifest(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    panel, truth = data.synth_generate(cfg.synth_config())
    data.save_panel(panel, out / "panel.csv")
    data.write_ground_truth(truth, out / "ground_truth.csv")
    return 0


def _load_prepared_panel(path: str, cfg: RunConfig) -> data.Panel:
    """A prepared panel given explicitly, else the config's data stage."""
    if path:
        result = data.load_panel(path)
        if result.rejected:
            raise StageError("data", f"prepared panel {path} has {len(result.rejected)} invalid rows")
        return result.panel
    return stage_data(cfg, Path(cfg.out_dir))


def cmd_fit(cfg: RunConfig, panel_path: str) -> int:
    panel = _load_prepared_panel(panel_path, cfg)
    out = Path(cfg.out_dir)
    try:
        fitted = forest.fit_forest(panel, cfg.forest_config(), threads=cfg.threads)
        forest.save_forest(fitted, out / "forest.txt")
        forest.write_importance_csv(
            forest.variable_importance(fitted, panel.feature_names, cfg.importance_scaling),
            out / "importance.csv")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("forest", str(exc)) from exc
    return 0


def cmd_tune(cfg: RunConfig, panel_path: str) -> int:
    panel = _load_prepared_panel(panel_path, cfg)
    stage_tune(cfg, panel, Path(cfg.out_dir))
    return 0


@_stage("interpret")
def cmd_interpret(cfg: RunConfig, panel_path: str, forest_path: str) -> int:
    panel = _load_prepared_panel(panel_path, cfg)
    fitted = forest.load_forest(forest_path)
    if fitted.n_features != len(panel.feature_names):
        raise StageError("interpret", "forest and panel disagree on the number of predictors")
    matrix = interpret.contribution_matrix(fitted, panel)
    interpret.write_contributions_csv(matrix, Path(cfg.out_dir) / "contributions.csv")
    return 0


@_stage("cluster")
def cmd_cluster(cfg: RunConfig, contrib_path: str, k_override: int | None) -> int:
    matrix = interpret.read_contributions_csv(contrib_path)
    points = matrix.contributions
    if cfg.standardize:
        points = cluster.standardize_columns(points)
    out = Path(cfg.out_dir)
    seed = child_seed(cfg.seed, "kmeans")
    if k_override is not None:
        solution = cluster.kmeans(points, k_override, cfg.n_starts, seed, cfg.kmeans_max_iter)
    else:
        solutions = cluster.evaluate_k_range(points, (cfg.k_min, cfg.k_max), cfg.n_starts,
                                             seed, cfg.kmeans_max_iter)
        report = cluster.select_k(points, (cfg.k_min, cfg.k_max), cfg.n_starts, seed,
                                  cfg.indices, cfg.kmeans_max_iter, solutions=solutions)
        cluster.write_kselection_csv(report, out / "kselection.csv")
        solution = solutions[report.final_k]
    cluster.write_assignments_csv(matrix.keys, solution.assignments, out / "assignments.csv")
    return 0


@_stage("stats")
def cmd_stats(cfg: RunConfig, contrib_path: str, assign_path: str) -> int:
    matrix = interpret.read_contributions_csv(contrib_path)
    keys, labels = cluster.read_assignments_csv(assign_path)
    if keys != matrix.keys:
        raise StageError("stats", "assignments and contribution matrix keys do not match")
    out = Path(cfg.out_dir)
    tests = stats.group_mean_tests(matrix.contributions, labels, matrix.feature_names)
    disc = stats.lda_discriminant(matrix.contributions, labels)
    rows_b = [("all", t.variable, t.wilks_lambda, t.f_stat, t.df1, t.df2, t.p_value, stats.stars(t.p_value))
              for t in tests]
    from .fileio import write_csv
    write_csv(out / "table4_panelB.csv",
              ["grouping", "variable", "wilks_lambda", "f_stat", "df1", "df2", "p_value", "stars"], rows_b)
    rows_a = [("all", j + 1, fn.eigenvalue, fn.wilks_lambda, fn.f_stat, fn.df1, fn.df2,
               fn.p_value, stats.stars(fn.p_value)) for j, fn in enumerate(disc.functions)]
    write_csv(out / "table4_panelA.csv",
              ["grouping", "function", "eigenvalue", "wilks_lambda", "f_stat", "df1", "df2", "p_value", "stars"],
              rows_a)
    return 0


@_stage("profile")
def cmd_profile(cfg: RunConfig, panel_path: str, contrib_path: str, assign_path: str) -> int:
    panel = _load_prepared_panel(panel_path, cfg)
    matrix = interpret.read_contributions_csv(contrib_path)
    keys, labels = cluster.read_assignments_csv(assign_path)
    if keys != matrix.keys or keys != panel.keys():
        raise StageError("profile", "panel, contributions, and assignments are not aligned")
    k = int(labels.max()) + 1
    centroids = np.stack([matrix.contributions[labels == c].mean(axis=0) for c in range(k)])
    diff = matrix.contributions - centroids[labels]
    solution = cluster.ClusterSolution(k, labels, centroids, float((diff * diff).sum()), 0, [])
    models = profile.rank_models(solution, matrix, panel)
    key_to_record = {rec.key(): rec for rec in panel}
    for model in models:
        complement = tuple(rec for key, rec in key_to_record.items() if key not in model.member_keys)
        model.characteristic = profile.characterize(model, complement, cfg.alpha)
    superscripts = profile.pairwise_superscripts(models, cfg.alpha)
    for model in models:
        model.pairwise_reject = superscripts[model.rank_label]
    out = Path(cfg.out_dir)
    profile.write_table5(models, "standalone", out / "table5.csv", out / "table5.md")
    profile.write_table6(profile.side_contributions(models), out / "table6.csv")
    if cfg.periods:
        rank_by_key = {key: m.rank for m in models for key in m.member_keys}
        profile.write_table10(profile.transition_report(rank_by_key, list(cfg.periods)),
                              out / "table10.csv")
    return 0


def cmd_bench(cfg: RunConfig, panel_path: str) -> int:
    panel = _load_prepared_panel(panel_path, cfg)
    stage_bench(cfg, panel, Path(cfg.out_dir))
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stratgroups",
        description="Identify strategic groups from per-component profitability contributions.",
    )
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    parser.add_argument("--threads", type=int, default=None, help="worker threads for tree fitting")
    parser.add_argument("--out", default=None, help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", help="full pipeline: data, forest, contributions, clustering, tables")
    sub.add_parser("synth", help="generate a synthetic panel and ground truth only")
    p_fit = sub.add_parser("fit", help="fit and save the forest")
    p_fit.add_argument("--panel", default="", help="prepared panel CSV (defaults to the config's data stage)")
    p_tune = sub.add_parser("tune", help="out-of-bag error grid over (mtry, min_node_size)")
    p_tune.add_argument("--panel", default="")
    p_int = sub.add_parser("interpret", help="contribution matrix from a saved forest")
    p_int.add_argument("--panel", default="")
    p_int.add_argument("--forest", required=True)
    p_clu = sub.add_parser("cluster", help="cluster-count selection and assignments from contributions")
    p_clu.add_argument("--contributions", required=True)
    p_clu.add_argument("--k", type=int, default=None, help="skip selection and use this k")
    p_sta = sub.add_parser("stats", help="discriminant validation tables from contributions + assignments")
    p_sta.add_argument("--contributions", required=True)
    p_sta.add_argument("--assignments", required=True)
    p_pro = sub.add_parser("profile", help="business-model tables from panel + contributions + assignments")
    p_pro.add_argument("--panel", default="")
    p_pro.add_argument("--contributions", required=True)
    p_pro.add_argument("--assignments", required=True)
    p_ben = sub.add_parser("bench", help="comparator table (rf / knn / gb / cart)")
    p_ben.add_argument("--panel", default="")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out, args.threads)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "fit":
            return cmd_fit(cfg, args.panel)
        if args.command == "tune":
            return cmd_tune(cfg, args.panel)
        if args.command == "interpret":
            return cmd_interpret(cfg, args.panel, args.forest)
        if args.command == "cluster":
            return cmd_cluster(cfg, args.contributions, args.k)
        if args.command == "stats":
            return cmd_stats(cfg, args.contributions, args.assignments)
        if args.command == "profile":
            return cmd_profile(cfg, args.panel, args.contributions, args.assignments)
        if args.command == "bench":
            return cmd_bench(cfg, args.panel)
        parser.error(f"unknown command {args.command!r}")
    except StageError as exc:
        print(f"error in stage '{exc.stage}': {exc}", file=sys.stderr)
        return STAGE_EXIT_CODES.get(exc.stage, 1)
    except data.DataError as exc:
        print(f"error in stage 'data': {exc}", file=sys.stderr)
        return STAGE_EXIT_CODES["data"]
    return 0


def entry() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(main())


if __name__ == "__main__":
    entry()
