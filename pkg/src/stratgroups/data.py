"""Panel ingestion, validation, outlier filtering, period splits, and
synthetic panels with planted group structure.

A panel is an ordered collection of bank-year observations. Each
observation carries a profitability response (pre-tax profit over total
assets) and nine balance-sheet components measured as ratios over total
assets. All functions here are pure: they return new panels and never
mutate their inputs.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import atomic_writer, fmt, write_csv
from .rng import substream

logger = logging.getLogger(__name__)

#: Canonical predictor order. The first four are asset-side components,
#: the last five fund the balance sheet (liability side).
FEATURE_NAMES: tuple[str, ...] = (
    "customer_loans",
    "interbank_lending",
    "derivative_exposures",
    "securities",
    "customer_deposits",
    "interbank_borrowing",
    "short_term_funding",
    "long_term_funding",
    "equity",
)
ASSET_COMPONENTS: tuple[str, ...] = FEATURE_NAMES[:4]
LIABILITY_COMPONENTS: tuple[str, ...] = FEATURE_NAMES[4:]
ALL_VARIABLES: tuple[str, ...] = ("roa",) + FEATURE_NAMES

PANEL_COLUMNS: tuple[str, ...] = ("bank_id", "country", "year") + ALL_VARIABLES


class DataError(Exception):
    """Unrecoverable input problem: missing file/column, duplicate keys,
    malformed configuration."""


@dataclass(frozen=True, slots=True)
class BankYearRecord:
    """One bank-year observation."""

    bank_id: str
    country: str
    year: int
    roa: float
    customer_loans: float
    interbank_lending: float
    derivative_exposures: float
    securities: float
    customer_deposits: float
    interbank_borrowing: float
    short_term_funding: float
    long_term_funding: float
    equity: float

    def key(self) -> tuple[str, int]:
        return (self.bank_id, self.year)

    def ratios(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in FEATURE_NAMES)

    def invariant_violation(self) -> str | None:
        """Reason this record is invalid, or None if it is acceptable.

        Ratios may exceed 1 (gross derivative exposures legitimately
        can); only negative or non-finite values are rejected. The
        response may be negative but must be finite.
        """
        if not math.isfinite(self.roa):
            return "roa is not finite"
        for name in FEATURE_NAMES:
            value = getattr(self, name)
            if not math.isfinite(value):
                return f"{name} is not finite"
            if value < 0:
                return f"{name} is negative"
        return None


class Panel:
    """Immutable ordered collection of records with the canonical
    predictor order. (bank_id, year) must be unique."""

    def __init__(self, records, feature_names: tuple[str, ...] = FEATURE_NAMES):
        records = tuple(records)
        feature_names = tuple(feature_names)
        if len(feature_names) != len(FEATURE_NAMES):
            raise DataError(f"expected {len(FEATURE_NAMES)} predictors, got {len(feature_names)}")
        seen: dict[tuple[str, int], int] = {}
        dupes: list[tuple[str, int]] = []
        for rec in records:
            k = rec.key()
            if k in seen:
                dupes.append(k)
            seen[k] = 1
        if dupes:
            shown = ", ".join(f"{b}/{y}" for b, y in sorted(set(dupes))[:20])
            raise DataError(f"duplicate (bank_id, year) keys: {shown}")
        self.records: tuple[BankYearRecord, ...] = records
        self.feature_names = feature_names
        self._X: np.ndarray | None = None
        self._y: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, Panel) and self.records == other.records

    def feature_matrix(self) -> np.ndarray:
        """(n, 9) array of predictor ratios in canonical order."""
        if self._X is None:
            X = np.array([rec.ratios() for rec in self.records], dtype=float)
            X = X.reshape(len(self.records), len(self.feature_names))
            X.flags.writeable = False
            self._X = X
        return self._X

    def roa(self) -> np.ndarray:
        if self._y is None:
            y = np.array([rec.roa for rec in self.records], dtype=float)
            y.flags.writeable = False
            self._y = y
        return self._y

    def keys(self) -> list[tuple[str, int]]:
        return [rec.key() for rec in self.records]

    def years(self) -> list[int]:
        return sorted({rec.year for rec in self.records})


@dataclass(frozen=True, slots=True)
class PeriodSpec:
    """Inclusive year range labelling an analysis period."""

    label: str
    year_min: int
    year_max: int

    def __post_init__(self):
        if self.year_min > self.year_max:
            raise DataError(f"period {self.label!r}: year_min {self.year_min} > year_max {self.year_max}")

    def contains(self, year: int) -> bool:
        return self.year_min <= year <= self.year_max


@dataclass(frozen=True, slots=True)
class RejectedRow:
    row: int  # 1-based data row index, header excluded
    reason: str


@dataclass(frozen=True, slots=True)
class LoadResult:
    panel: Panel
    rejected: list[RejectedRow]


def _resolve_columns(fieldnames, schema: dict[str, str] | None) -> dict[str, str]:
    """Map canonical column names to file column names, validating presence."""
    schema = dict(schema or {})
    available = set(fieldnames or ())
    resolved: dict[str, str] = {}
    for canonical in PANEL_COLUMNS:
        source = schema.get(canonical, canonical)
        if source is None and canonical == "country":
            continue  # explicitly absent; filled with ""
        if source not in available:
            if canonical == "country" and canonical not in schema:
                continue  # country is optional unless the schema names it
            raise DataError(f"missing column {source!r} (for {canonical!r})")
        resolved[canonical] = source
    return resolved


def load_panel(path: str | Path, schema: dict[str, str] | None = None) -> LoadResult:
    """Read a UTF-8 CSV with a header row into a Panel.

    `schema` maps canonical column names to the file's column names
    (identity by default). Rows that fail to parse or violate record
    invariants are rejected and reported; duplicate (bank_id, year)
    keys are a hard error.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    records: list[BankYearRecord] = []
    rejected: list[RejectedRow] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"empty input file: {path}")
        columns = _resolve_columns(reader.fieldnames, schema)
        for rownum, raw in enumerate(reader, start=1):
            reason = None
            values: dict[str, object] = {}
            for canonical in PANEL_COLUMNS:
                source = columns.get(canonical)
                if source is None:
                    values[canonical] = ""
                    continue
                cell = raw.get(source)
                if cell is None or cell.strip() == "":
                    reason = f"missing {canonical}"
                    break
                cell = cell.strip()
                if canonical in ("bank_id", "country"):
                    values[canonical] = cell
                elif canonical == "year":
                    try:
                        values[canonical] = int(cell)
                    except ValueError:
                        reason = f"unparseable year: {cell!r}"
                        break
                else:
                    try:
                        values[canonical] = float(cell)
                    except ValueError:
                        reason = f"unparseable {canonical}: {cell!r}"
                        break
            if reason is None:
                record = BankYearRecord(**values)  # type: ignore[arg-type]
                reason = record.invariant_violation()
                if reason is None:
                    records.append(record)
                    continue
            rejected.append(RejectedRow(rownum, reason))
    panel = Panel(records)
    if rejected:
        logger.info("load_panel: accepted %d rows, rejected %d", len(records), len(rejected))
    return LoadResult(panel, rejected)


def save_panel(panel: Panel, path: str | Path) -> None:
    """Write a panel in the canonical CSV layout (load/save round-trips)."""
    rows = (
        [rec.bank_id, rec.country, rec.year, rec.roa, *rec.ratios()]
        for rec in panel
    )
    write_csv(path, list(PANEL_COLUMNS), rows)


def write_reject_report(rejected: list[RejectedRow], path: str | Path) -> None:
    write_csv(path, ["row", "reason"], ((r.row, r.reason) for r in rejected))


def _values_matrix(panel: Panel) -> np.ndarray:
    """(n, 10) matrix of [roa, nine ratios] used for outlier screening."""
    return np.column_stack([panel.roa(), panel.feature_matrix()])


def quantile_bounds(panel: Panel, lower_q: float, upper_q: float) -> dict[str, tuple[float, float]]:
    """Per-variable empirical [lower_q, upper_q] bounds, by linear
    interpolation of order statistics."""
    values = _values_matrix(panel)
    lo = np.quantile(values, lower_q, axis=0, method="linear")
    hi = np.quantile(values, upper_q, axis=0, method="linear")
    return {name: (float(lo[i]), float(hi[i])) for i, name in enumerate(ALL_VARIABLES)}


def filter_outliers(
    panel: Panel,
    lower_q: float = 0.005,
    upper_q: float = 0.995,
    bounds: dict[str, tuple[float, float]] | None = None,
) -> tuple[Panel, int]:
    """Drop records with any variable strictly outside its quantile band.

    Quantiles are computed once on the input panel; pass `bounds` to
    reuse bounds frozen from an earlier call (the operation is then
    idempotent). Returns the filtered panel and the number of drops.
    """
    if len(panel) == 0:
        raise DataError("cannot filter an empty panel")
    if not (0.0 <= lower_q < upper_q <= 1.0):
        raise DataError(f"invalid quantile bounds ({lower_q}, {upper_q})")
    if bounds is None:
        bounds = quantile_bounds(panel, lower_q, upper_q)
    lo = np.array([bounds[name][0] for name in ALL_VARIABLES])
    hi = np.array([bounds[name][1] for name in ALL_VARIABLES])
    values = _values_matrix(panel)
    keep = ((values >= lo) & (values <= hi)).all(axis=1)
    kept = [rec for rec, ok in zip(panel.records, keep) if ok]
    dropped = len(panel) - len(kept)
    return Panel(kept, panel.feature_names), dropped


def split_periods(panel: Panel, periods: list[PeriodSpec]) -> list[Panel]:
    """One sub-panel per period; records outside every period are dropped.

    Periods must not overlap. Empty sub-panels are allowed but logged.
    """
    ordered = sorted(periods, key=lambda p: p.year_min)
    for prev, nxt in zip(ordered, ordered[1:]):
        if nxt.year_min <= prev.year_max:
            raise DataError(f"periods {prev.label!r} and {nxt.label!r} overlap")
    out: list[Panel] = []
    for spec in periods:
        sub = Panel(
            [rec for rec in panel if spec.contains(rec.year)],
            panel.feature_names,
        )
        if len(sub) == 0:
            logger.warning("period %r contains no records", spec.label)
        out.append(sub)
    return out


# ---------------------------------------------------------------------------
# Synthetic panels


@dataclass(frozen=True)
class Archetype:
    """Mean balance-sheet profile of one planted group plus a linear
    response rule roa = intercept + coefs . ratios."""

    name: str
    asset_means: tuple[float, ...]      # 4 entries, sum ~ 1
    liability_means: tuple[float, ...]  # 5 entries, sum ~ 1
    roa_intercept: float
    roa_coefs: tuple[float, ...]        # 9 entries, canonical order

    def __post_init__(self):
        if len(self.asset_means) != len(ASSET_COMPONENTS):
            raise DataError(f"archetype {self.name!r}: expected {len(ASSET_COMPONENTS)} asset means")
        if len(self.liability_means) != len(LIABILITY_COMPONENTS):
            raise DataError(f"archetype {self.name!r}: expected {len(LIABILITY_COMPONENTS)} liability means")
        if len(self.roa_coefs) != len(FEATURE_NAMES):
            raise DataError(f"archetype {self.name!r}: expected {len(FEATURE_NAMES)} response coefficients")
        for v in self.asset_means + self.liability_means:
            if v < 0:
                raise DataError(f"archetype {self.name!r}: negative ratio mean")
        for label, side in (("asset", self.asset_means), ("liability", self.liability_means)):
            total = math.fsum(side)
            if abs(total - 1.0) > 1e-6:
                raise DataError(f"archetype {self.name!r}: {label} means sum to {total}, not 1")

    def mean_ratios(self) -> np.ndarray:
        return np.array(self.asset_means + self.liability_means, dtype=float)

    def response(self, ratios: np.ndarray) -> float:
        return float(self.roa_intercept + np.dot(np.asarray(self.roa_coefs), ratios))


def default_archetypes() -> tuple[Archetype, ...]:
    """Three stylized profiles: retail-focused, wholesale-funded, and
    non-specialized. Every component mean differs from the average of
    the other two groups by at least 0.01, so each group has an
    unambiguous set of elevated components."""
    retail = Archetype(
        name="retail",
        asset_means=(0.62, 0.10, 0.04, 0.24),
        liability_means=(0.55, 0.08, 0.07, 0.10, 0.20),
        roa_intercept=0.004,
        roa_coefs=(0.012, 0.0, -0.004, 0.0, 0.010, 0.0, 0.0, 0.0, 0.020),
    )
    wholesale = Archetype(
        name="wholesale",
        asset_means=(0.30, 0.28, 0.16, 0.26),
        liability_means=(0.18, 0.30, 0.22, 0.24, 0.06),
        roa_intercept=-0.002,
        roa_coefs=(-0.004, 0.010, 0.008, 0.0, 0.0, 0.0, 0.008, 0.006, 0.0),
    )
    nonspecialized = Archetype(
        name="nonspecialized",
        asset_means=(0.44, 0.16, 0.08, 0.32),
        liability_means=(0.34, 0.16, 0.13, 0.16, 0.21),
        roa_intercept=-0.006,
        roa_coefs=(-0.006, 0.0, 0.0, 0.008, -0.006, 0.0, 0.0, 0.0, 0.015),
    )
    return (retail, wholesale, nonspecialized)


#: Components whose archetype mean exceeds the average of the other
#: groups' means, i.e. the expected characteristic set per group.
def planted_elevated_components(archetypes: tuple[Archetype, ...]) -> list[set[str]]:
    means = np.stack([a.mean_ratios() for a in archetypes])
    k = len(archetypes)
    out: list[set[str]] = []
    for g in range(k):
        others = means[[i for i in range(k) if i != g]].mean(axis=0)
        out.append({name for j, name in enumerate(FEATURE_NAMES) if means[g, j] > others[j]})
    return out


@dataclass(frozen=True)
class SynthConfig:
    n_banks: int
    n_years: int
    k_planted: int = 3
    archetypes: tuple[Archetype, ...] | None = None  # default_archetypes() when None
    noise_sd: float = 0.002
    ratio_sd: float = 0.02
    start_year: int = 2000
    seed: int = 0

    def resolved_archetypes(self) -> tuple[Archetype, ...]:
        archetypes = self.archetypes if self.archetypes is not None else default_archetypes()
        if self.k_planted < 2:
            raise DataError("k_planted must be at least 2")
        if len(archetypes) != self.k_planted:
            raise DataError(f"need {self.k_planted} archetypes, got {len(archetypes)}")
        return archetypes


def synth_generate(cfg: SynthConfig) -> tuple[Panel, dict[tuple[str, int], int]]:
    """Generate a panel with planted group structure.

    Banks are assigned to groups round-robin and keep their group over
    time. Ratios are the group means plus clipped gaussian jitter;
    the response is the group's linear rule plus gaussian noise.
    Deterministic for a fixed seed. Returns the panel and the planted
    label per (bank_id, year).
    """
    archetypes = cfg.resolved_archetypes()
    if cfg.n_banks < 1 or cfg.n_years < 1:
        raise DataError("n_banks and n_years must be positive")
    rng = substream(cfg.seed, "synth")
    records: list[BankYearRecord] = []
    truth: dict[tuple[str, int], int] = {}
    width = max(5, len(str(cfg.n_banks)))
    for b in range(cfg.n_banks):
        group = b % cfg.k_planted
        arch = archetypes[group]
        bank_id = f"B{b:0{width}d}"
        means = arch.mean_ratios()
        for t in range(cfg.n_years):
            year = cfg.start_year + t
            ratios = np.clip(means + rng.normal(0.0, cfg.ratio_sd, size=means.size), 0.0, None)
            roa = arch.response(ratios) + float(rng.normal(0.0, cfg.noise_sd))
            records.append(
                BankYearRecord(bank_id, arch.name, year, roa, *ratios.tolist())
            )
            truth[(bank_id, year)] = group
    return Panel(records), truth


def write_ground_truth(truth: dict[tuple[str, int], int], path: str | Path) -> None:
    """Two-column CSV: combined bank-year key and planted label."""
    rows = ((f"{bank}:{year}", label) for (bank, year), label in truth.items())
    write_csv(path, ["key", "label"], rows)
