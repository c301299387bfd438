"""Business-model reports: ranking clusters by total contribution,
characteristic-component identification, asset/liability side splits,
per-period pipeline runs, and migration matrices.

Human-facing tables report contributions multiplied by 100; the CSV
files keep raw response units.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cluster import (
    ClusterSolution,
    INDEX_NAMES,
    KSelectionReport,
    evaluate_k_range,
    select_k,
    standardize_columns,
)
from .data import (
    ASSET_COMPONENTS,
    BankYearRecord,
    DataError,
    FEATURE_NAMES,
    LIABILITY_COMPONENTS,
    Panel,
    PeriodSpec,
    split_periods,
)
from .fileio import atomic_writer, write_csv
from .forest import Forest, ForestConfig, ImportanceReport, fit_forest, variable_importance
from .interpret import ContributionMatrix, contribution_matrix
from .stats import (
    DiscriminantReport,
    VariableTest,
    WmwResult,
    group_mean_tests,
    lda_discriminant,
    stars,
    wmw_test,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ComponentTest:
    component: str
    mean_model: float
    mean_complement: float
    wmw: WmwResult
    characteristic: bool


@dataclass
class BusinessModel:
    rank_label: str                     # "BM1" is the best performer
    rank: int                           # 1-based
    cluster_id: int                     # original cluster label
    member_keys: set
    member_records: tuple[BankYearRecord, ...]
    mean_contributions: np.ndarray      # per component, response units
    total_contribution: float
    mean_ratios: np.ndarray
    characteristic: dict[str, ComponentTest] = field(default_factory=dict)
    pairwise_reject: dict[str, list[int]] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.member_records)

    def characteristic_components(self) -> set[str]:
        return {c for c, t in self.characteristic.items() if t.characteristic}


def rank_models(solution: ClusterSolution, contribs: ContributionMatrix, panel: Panel) -> list[BusinessModel]:
    """Rank clusters by their mean total contribution, best first.

    The total is the sum of the per-component mean contributions,
    equivalently the mean over members of per-record contribution
    totals. Ties break toward the larger cluster, then the lower
    original cluster label.
    """
    if len(contribs) != len(panel) or contribs.keys != panel.keys():
        raise ValueError("contribution matrix and panel are not aligned")
    if len(contribs) != solution.assignments.size:
        raise ValueError("cluster solution and contribution matrix are not aligned")
    ratios = panel.feature_matrix()
    entries = []
    for cluster_id in range(solution.k):
        member_idx = np.nonzero(solution.assignments == cluster_id)[0]
        if member_idx.size == 0:
            raise ValueError(f"cluster {cluster_id} is empty")
        mean_contrib = contribs.contributions[member_idx].mean(axis=0)
        entries.append((cluster_id, member_idx, mean_contrib, float(mean_contrib.sum())))
    entries.sort(key=lambda e: (-e[3], -e[1].size, e[0]))
    models = []
    for rank, (cluster_id, member_idx, mean_contrib, total) in enumerate(entries, start=1):
        records = tuple(panel.records[i] for i in member_idx)
        models.append(BusinessModel(
            rank_label=f"BM{rank}",
            rank=rank,
            cluster_id=cluster_id,
            member_keys={contribs.keys[i] for i in member_idx},
            member_records=records,
            mean_contributions=mean_contrib,
            total_contribution=total,
            mean_ratios=ratios[member_idx].mean(axis=0),
        ))
    return models


def characterize(model: BusinessModel, complement: tuple[BankYearRecord, ...],
                 alpha: float = 0.10) -> dict[str, ComponentTest]:
    """A component is characteristic of a model when its mean ratio in
    the model exceeds the complement's mean and the rank-sum test
    rejects equality of the two ratio distributions at `alpha`."""
    if not model.member_records or not complement:
        raise ValueError("model and complement must both be nonempty")
    model_keys = model.member_keys
    if any(rec.key() in model_keys for rec in complement):
        raise ValueError("model and complement sets overlap")
    out: dict[str, ComponentTest] = {}
    for j, component in enumerate(FEATURE_NAMES):
        in_model = np.array([getattr(r, component) for r in model.member_records])
        outside = np.array([getattr(r, component) for r in complement])
        result = wmw_test(in_model, outside)
        higher = in_model.mean() > outside.mean()
        out[component] = ComponentTest(
            component=component,
            mean_model=float(in_model.mean()),
            mean_complement=float(outside.mean()),
            wmw=result,
            characteristic=bool(higher and result.p_two_sided < alpha),
        )
    return out


def pairwise_superscripts(models: list[BusinessModel], alpha: float = 0.10) -> dict[str, dict[str, list[int]]]:
    """For every model and component, the ranks of the other models
    whose component distribution differs at level `alpha` (the table
    superscripts)."""
    values = {
        m.rank: {c: np.array([getattr(r, c) for r in m.member_records]) for c in FEATURE_NAMES}
        for m in models
    }
    out: dict[str, dict[str, list[int]]] = {m.rank_label: {c: [] for c in FEATURE_NAMES} for m in models}
    for i, a in enumerate(models):
        for b in models[i + 1:]:
            for component in FEATURE_NAMES:
                res = wmw_test(values[a.rank][component], values[b.rank][component])
                if res.p_two_sided < alpha:
                    out[a.rank_label][component].append(b.rank)
                    out[b.rank_label][component].append(a.rank)
    for per_model in out.values():
        for component in per_model:
            per_model[component].sort()
    return out


@dataclass(frozen=True)
class SideContribution:
    rank_label: str
    asset_contribution: float
    liability_contribution: float

    @property
    def total(self) -> float:
        return self.asset_contribution + self.liability_contribution


def side_contributions(models: list[BusinessModel]) -> list[SideContribution]:
    """Split each model's total contribution into the asset-side sum
    (loans, interbank lending, derivatives, securities) and the
    liability-side sum (deposits, interbank borrowing, short/long-term
    funding, equity)."""
    asset_idx = [FEATURE_NAMES.index(c) for c in ASSET_COMPONENTS]
    liab_idx = [FEATURE_NAMES.index(c) for c in LIABILITY_COMPONENTS]
    return [
        SideContribution(
            m.rank_label,
            float(m.mean_contributions[asset_idx].sum()),
            float(m.mean_contributions[liab_idx].sum()),
        )
        for m in models
    ]


# ---------------------------------------------------------------------------
# Transitions


@dataclass(frozen=True)
class TransitionRow:
    label: str
    worse_pct: float
    equal_pct: float
    better_pct: float
    n_pairs: int  # number of consecutive-year pairs averaged


def transition_report(rank_by_key: dict[tuple[str, int], int],
                      periods: list[PeriodSpec] | None = None) -> list[TransitionRow]:
    """Year-over-year migration percentages.

    `rank_by_key` maps (bank_id, year) to the model rank (1 = best).
    For each consecutive-year pair the banks present in both years are
    classified as worse (rank number rose), equal, or better; period
    rows average the per-pair percentages over pairs whose later year
    falls in the period, and the overall row averages all pairs.
    """
    by_year: dict[int, dict[str, int]] = {}
    for (bank, year), rank in rank_by_key.items():
        by_year.setdefault(year, {})[bank] = rank
    years = sorted(by_year)
    pair_pcts: list[tuple[int, tuple[float, float, float]]] = []
    for year in years:
        nxt = by_year.get(year + 1)
        if nxt is None:
            continue
        cur = by_year[year]
        common = [bank for bank in cur if bank in nxt]
        if not common:
            continue
        worse = sum(1 for bank in common if nxt[bank] > cur[bank])
        better = sum(1 for bank in common if nxt[bank] < cur[bank])
        equal = len(common) - worse - better
        denom = len(common)
        pair_pcts.append((year + 1, (100.0 * worse / denom, 100.0 * equal / denom, 100.0 * better / denom)))
    if not pair_pcts:
        raise ValueError("no bank is present in two consecutive years")

    def average(pairs) -> tuple[float, float, float]:
        w = float(np.mean([p[0] for p in pairs]))
        e = float(np.mean([p[1] for p in pairs]))
        b = float(np.mean([p[2] for p in pairs]))
        return w, e, b

    rows = []
    all_pcts = [p for _, p in pair_pcts]
    w, e, b = average(all_pcts)
    rows.append(TransitionRow("whole_sample", w, e, b, len(all_pcts)))
    for spec in periods or []:
        in_period = [p for year, p in pair_pcts if spec.contains(year)]
        if not in_period:
            logger.warning("transition_report: no consecutive-year pairs end in period %r", spec.label)
            continue
        w, e, b = average(in_period)
        rows.append(TransitionRow(spec.label, w, e, b, len(in_period)))
    return rows


# ---------------------------------------------------------------------------
# Full pipeline per scope (whole sample or one period)


@dataclass(frozen=True)
class PipelineConfig:
    forest: ForestConfig = ForestConfig()
    k_min: int = 2
    k_max: int = 10
    n_starts: int = 100
    cluster_seed: int = 0
    standardize: bool = False
    indices: tuple[str, ...] = INDEX_NAMES
    alpha: float = 0.10
    importance_scaling: str = "minmax"
    transition_ranking: str = "whole_sample"  # or "per_period"
    min_period_records: int = 200
    kmeans_max_iter: int = 300
    threads: int = 1


@dataclass
class RunReport:
    label: str
    panel: Panel
    forest: Forest
    importance: ImportanceReport
    contributions: ContributionMatrix
    k_report: KSelectionReport
    solution: ClusterSolution
    models: list[BusinessModel]
    superscripts: dict[str, dict[str, list[int]]]
    sides: list[SideContribution]
    group_tests: dict[str, list[VariableTest]]       # grouping label -> per-variable tests
    discriminant: dict[str, DiscriminantReport]      # grouping label -> report

    def rank_by_key(self) -> dict[tuple[str, int], int]:
        out: dict[tuple[str, int], int] = {}
        for model in self.models:
            for key in model.member_keys:
                out[key] = model.rank
        return out


def run_single(panel: Panel, cfg: PipelineConfig, label: str = "whole_sample") -> RunReport:
    """The full chain for one panel: forest, contributions, cluster
    count selection, clustering, ranking, characterization, side
    split, and discriminant validation."""
    if len(panel) == 0:
        raise DataError(f"{label}: empty panel")
    forest = fit_forest(panel, cfg.forest, threads=cfg.threads)
    importance = variable_importance(forest, panel.feature_names, cfg.importance_scaling)
    contribs = contribution_matrix(forest, panel)
    points = contribs.contributions
    if cfg.standardize:
        points = standardize_columns(points)
    solutions = evaluate_k_range(points, (cfg.k_min, cfg.k_max), cfg.n_starts,
                                 cfg.cluster_seed, cfg.kmeans_max_iter,
                                 include_hartigan_extra="hartigan" in cfg.indices)
    k_report = select_k(points, (cfg.k_min, cfg.k_max), cfg.n_starts, cfg.cluster_seed,
                        cfg.indices, cfg.kmeans_max_iter, solutions=solutions)
    solution = solutions[k_report.final_k]
    models = rank_models(solution, contribs, panel)
    key_to_record = {rec.key(): rec for rec in panel}
    for model in models:
        complement = tuple(rec for key, rec in key_to_record.items() if key not in model.member_keys)
        model.characteristic = characterize(model, complement, cfg.alpha)
    superscripts = pairwise_superscripts(models, cfg.alpha)
    for model in models:
        model.pairwise_reject = superscripts[model.rank_label]
    sides = side_contributions(models)

    ranks = np.empty(len(panel), dtype=np.int64)
    rank_of_cluster = {m.cluster_id: m.rank for m in models}
    for i, cluster_id in enumerate(solution.assignments):
        ranks[i] = rank_of_cluster[int(cluster_id)]
    group_tests = {"all": group_mean_tests(points, ranks, panel.feature_names)}
    discriminant = {"all": lda_discriminant(points, ranks)}
    for i, a in enumerate(models):
        for b in models[i + 1:]:
            sel = np.isin(ranks, [a.rank, b.rank])
            grouping = f"{a.rank_label}_vs_{b.rank_label}"
            group_tests[grouping] = group_mean_tests(points[sel], ranks[sel], panel.feature_names)
            discriminant[grouping] = lda_discriminant(points[sel], ranks[sel])
    return RunReport(label, panel, forest, importance, contribs, k_report, solution,
                     models, superscripts, sides, group_tests, discriminant)


@dataclass
class PeriodAnalysis:
    whole: RunReport
    period_reports: list[RunReport]
    transitions: list[TransitionRow]


def run_period_analysis(panel: Panel, periods: list[PeriodSpec], cfg: PipelineConfig) -> PeriodAnalysis:
    """Refit the entire pipeline independently on the whole sample and
    on each period sub-panel, then compute migration percentages.

    By default migrations are ranked by the whole-sample model order so
    worse/equal/better is comparable across periods; set
    `transition_ranking="per_period"` to rank each period by its own
    model order.
    """
    whole = run_single(panel, cfg, "whole_sample")
    sub_panels = split_periods(panel, periods)
    period_reports: list[RunReport] = []
    for spec, sub in zip(periods, sub_panels):
        if len(sub) < cfg.min_period_records:
            raise DataError(
                f"period {spec.label!r} has {len(sub)} records; "
                f"at least {cfg.min_period_records} required"
            )
        period_reports.append(run_single(sub, cfg, spec.label))
    if cfg.transition_ranking == "per_period":
        rank_by_key: dict[tuple[str, int], int] = {}
        for report in period_reports:
            rank_by_key.update(report.rank_by_key())
    elif cfg.transition_ranking == "whole_sample":
        rank_by_key = whole.rank_by_key()
    else:
        raise DataError(f"unknown transition_ranking {cfg.transition_ranking!r}")
    transitions = transition_report(rank_by_key, periods)
    return PeriodAnalysis(whole, period_reports, transitions)


# ---------------------------------------------------------------------------
# Table writers


def write_table5(models: list[BusinessModel], label: str,
                 csv_path: str | Path, md_path: str | Path | None = None) -> None:
    """Long-format CSV of both panels: contribution means (panel A, raw
    units) and component ratio means with significance markers and
    characteristic flags (panel B)."""
    rows = []
    for model in models:
        for j, component in enumerate(FEATURE_NAMES):
            rows.append(("A", model.rank_label, component,
                         float(model.mean_contributions[j]), "", "", ""))
        rows.append(("A", model.rank_label, "total", model.total_contribution, "", "", ""))
    for model in models:
        complement_means = {c: t.mean_complement for c, t in model.characteristic.items()}
        for component in FEATURE_NAMES:
            test = model.characteristic[component]
            superscript = "".join(str(r) for r in model.pairwise_reject.get(component, []))
            rows.append(("B", model.rank_label, component, test.mean_model,
                         stars(test.wmw.p_two_sided), superscript, test.characteristic))
        for component in FEATURE_NAMES:
            rows.append(("B", f"S-{model.rank_label}", component,
                         complement_means[component], "", "", ""))
    write_csv(csv_path, ["panel", "model", "component", "value", "stars", "superscripts", "characteristic"], rows)
    if md_path is not None:
        _write_table5_md(models, label, md_path)


def _write_table5_md(models: list[BusinessModel], label: str, path: str | Path) -> None:
    names = [c.replace("_", " ") for c in FEATURE_NAMES]
    with atomic_writer(path) as fh:
        fh.write(f"# Business models ({label})\n\n")
        fh.write("## Panel A - contributions to profitability (x100)\n\n")
        fh.write("| model | " + " | ".join(names) + " | total |\n")
        fh.write("|" + "---|" * (len(names) + 2) + "\n")
        for model in models:
            cells = [f"{100.0 * v:.4f}" for v in model.mean_contributions]
            fh.write(f"| {model.rank_label} | " + " | ".join(cells)
                     + f" | {100.0 * model.total_contribution:.4f} |\n")
        fh.write("\n## Panel B - component ratios (bold = characteristic; "
                 "superscripts list models whose distribution differs at 10%)\n\n")
        fh.write("| model | " + " | ".join(names) + " |\n")
        fh.write("|" + "---|" * (len(names) + 1) + "\n")
        for model in models:
            cells = []
            for component in FEATURE_NAMES:
                test = model.characteristic[component]
                sup = "".join(str(r) for r in model.pairwise_reject.get(component, []))
                cell = f"{test.mean_model:.4f}{stars(test.wmw.p_two_sided)}"
                if sup:
                    cell += f"^{sup}"
                if test.characteristic:
                    cell = f"**{cell}**"
                cells.append(cell)
            fh.write(f"| {model.rank_label} | " + " | ".join(cells) + " |\n")
            comp_cells = [f"{model.characteristic[c].mean_complement:.4f}" for c in FEATURE_NAMES]
            fh.write(f"| S-{model.rank_label} | " + " | ".join(comp_cells) + " |\n")
        fh.write("\nSignificance: *** p<0.01, ** p<0.05, * p<0.10 "
                 "(rank-sum test against the model's complement set).\n")


def write_table6(sides: list[SideContribution], path: str | Path) -> None:
    write_csv(path, ["model", "asset_contribution", "liability_contribution", "total"],
              ((s.rank_label, s.asset_contribution, s.liability_contribution, s.total) for s in sides))


def write_table10(rows: list[TransitionRow], path: str | Path) -> None:
    write_csv(path, ["period", "worse_pct", "equal_pct", "better_pct", "n_pairs"],
              ((r.label, r.worse_pct, r.equal_pct, r.better_pct, r.n_pairs) for r in rows))


def write_table4(report: RunReport, panel_a_path: str | Path, panel_b_path: str | Path) -> None:
    rows_a = []
    for grouping, disc in report.discriminant.items():
        for j, fn in enumerate(disc.functions, start=1):
            rows_a.append((grouping, j, fn.eigenvalue, fn.wilks_lambda,
                           fn.f_stat, fn.df1, fn.df2, fn.p_value, stars(fn.p_value)))
    write_csv(panel_a_path,
              ["grouping", "function", "eigenvalue", "wilks_lambda", "f_stat", "df1", "df2", "p_value", "stars"],
              rows_a)
    rows_b = []
    for grouping, tests in report.group_tests.items():
        for t in tests:
            rows_b.append((grouping, t.variable, t.wilks_lambda, t.f_stat,
                           t.df1, t.df2, t.p_value, stars(t.p_value)))
    write_csv(panel_b_path,
              ["grouping", "variable", "wilks_lambda", "f_stat", "df1", "df2", "p_value", "stars"],
              rows_b)
