"""Cohort statistics: paired and Welch t-tests, ICC(A,1) and cohort report tables."""

import itertools
import logging
import math
from collections.abc import Sequence
from typing import Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import special
from scipy.stats import truncnorm

from octa.exceptions import ArgumentError, DegenerateSampleError, PairingError
from octa.models import METRICS_COLUMNS, MetricsRow

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "octa-cohort-report/1"
ICC_FORM = "ICC(A,1): two-way random effects, absolute agreement, single measure"
SIGNIFICANCE = 0.05

METRICS = ["area_mm2", "d_min_mm", "d_max_mm", "eccentricity", "density"]
METRIC_LABELS = {
    "area_mm2": "FAZ area (mm2)",
    "d_min_mm": "Min FAZ diameter (mm)",
    "d_max_mm": "Max FAZ diameter (mm)",
    "eccentricity": "FAZ eccentricity",
    "density": "Perifoveal vessel density",
}


class PairedSample(BaseModel):
    """Two measurements of the same eyes (e.g. manual vs automated)."""

    values_a: list[float]
    values_b: list[float]

    @model_validator(mode="after")
    def _check(self):
        if len(self.values_a) != len(self.values_b):
            raise ValueError(f"unequal lengths {len(self.values_a)} and {len(self.values_b)}")
        if len(self.values_a) < 2:
            raise ValueError("a paired sample needs at least 2 pairs")
        if not np.all(np.isfinite(self.values_a + self.values_b)):
            raise ValueError("paired sample contains non-finite values")
        return self

    @property
    def a(self) -> np.ndarray:
        return np.asarray(self.values_a, dtype=np.float64)

    @property
    def b(self) -> np.ndarray:
        return np.asarray(self.values_b, dtype=np.float64)


class TestResult(BaseModel):
    __test__ = False

    statistic: float
    degrees_of_freedom: float = Field(gt=0)
    p_value: float = Field(ge=0, le=1)
    tails: Literal[2] = 2


def t_cdf(t: float, df: float) -> float:
    """Student t CDF through the regularized incomplete beta I_x(df/2, 1/2), x = df/(df+t^2)."""
    if not df > 0:
        raise ArgumentError(f"degrees of freedom must be positive, got {df}")
    tail = 0.5 * special.betainc(df / 2.0, 0.5, df / (df + t * t))
    return float(1.0 - tail if t > 0 else tail)


def two_tailed_p(t: float, df: float) -> float:
    return float(min(1.0, special.betainc(df / 2.0, 0.5, df / (df + t * t))))


def paired_t(s: PairedSample) -> TestResult:
    """
    Paired t-test on a - b.

    Raises:
        DegenerateSampleError: the differences have zero variance
    """
    d = s.a - s.b
    n = len(d)
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateSampleError("paired differences have zero variance")
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    return TestResult(statistic=t, degrees_of_freedom=n - 1, p_value=two_tailed_p(t, n - 1))


def welch_t(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """
    Two-sample t-test without the equal-variance assumption (Welch-Satterthwaite df).

    Raises:
        DegenerateSampleError: both samples have zero variance
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(y) < 2:
        raise ArgumentError(f"Welch's test needs >= 2 values per group, got {len(x)} and {len(y)}")
    vx = float(np.var(x, ddof=1)) / len(x)
    vy = float(np.var(y, ddof=1)) / len(y)
    if vx == 0.0 and vy == 0.0:
        raise DegenerateSampleError("both groups have zero variance")
    se2 = vx + vy
    t = (float(np.mean(x)) - float(np.mean(y))) / math.sqrt(se2)
    df = se2 * se2 / (vx * vx / (len(x) - 1) + vy * vy / (len(y) - 1))
    return TestResult(statistic=t, degrees_of_freedom=df, p_value=two_tailed_p(t, df))


def icc(s: PairedSample) -> float:
    """
    Two-way, single-measure, absolute-agreement ICC with k = 2 raters.

    (MS_R - MS_E) / (MS_R + (k-1) MS_E + (k/n)(MS_C - MS_E)) from the
    two-way ANOVA of the n x 2 ratings table.
    """
    ratings = np.column_stack([s.a, s.b])
    n, k = ratings.shape
    grand = ratings.mean()
    row_means = ratings.mean(axis=1)
    col_means = ratings.mean(axis=0)
    ss_rows = k * float(np.sum((row_means - grand) ** 2))
    ss_cols = n * float(np.sum((col_means - grand) ** 2))
    residual = ratings - row_means[:, None] - col_means[None, :] + grand
    ss_error = float(np.sum(residual**2))
    if ss_rows + ss_cols + ss_error == 0.0:
        raise DegenerateSampleError("ratings have zero total variance")
    ms_r = ss_rows / (n - 1)
    ms_c = ss_cols / (k - 1)
    ms_e = ss_error / ((n - 1) * (k - 1))
    return (ms_r - ms_e) / (ms_r + (k - 1) * ms_e + (k / n) * (ms_c - ms_e))


class Summary(BaseModel):
    n: int
    mean: float
    sd: Optional[float] = Field(default=None, description="Sample (n-1) SD; None for n < 2")

    def __str__(self) -> str:
        return f"{self.mean:.3f} ± {self.sd:.3f}" if self.sd is not None else f"{self.mean:.3f}"


def describe(values: Sequence[float]) -> Summary:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ArgumentError("cannot describe an empty sample")
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return Summary(n=len(values), mean=float(np.mean(values)), sd=sd)


# Cohort report


class CellSummary(BaseModel):
    cohort: str
    rater: str
    metric: str
    summary: Summary


class RaterAgreement(BaseModel):
    """Manual vs automated comparison of one metric within one cohort."""

    cohort: str
    metric: str
    n: int
    paired_t: Optional[TestResult] = None
    paired_t_note: Optional[str] = None
    icc: Optional[float] = None
    icc_note: Optional[str] = None


class CohortComparison(BaseModel):
    """Welch comparison of one metric between two cohorts."""

    metric: str
    rater: str
    cohorts: tuple[str, str]
    welch: Optional[TestResult] = None
    note: Optional[str] = None


class CohortReport(BaseModel):
    schema_id: str = Field(default=REPORT_SCHEMA, alias="schema")
    icc_form: str = ICC_FORM
    tails: Literal[2] = 2
    sd_convention: str = "sample (n-1)"
    grouping: str = "cohort"
    cells: list[CellSummary] = Field(default_factory=list)
    agreement: list[RaterAgreement] = Field(default_factory=list)
    comparisons: list[CohortComparison] = Field(default_factory=list)

    model_config = ConfigDict(populate_by_name=True)

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2) + "\n"


def rows_frame(rows: Union[pd.DataFrame, Sequence[MetricsRow]]) -> pd.DataFrame:
    if isinstance(rows, pd.DataFrame):
        return rows[METRICS_COLUMNS].copy()
    return pd.DataFrame.from_records([r.model_dump() for r in rows], columns=METRICS_COLUMNS)


def _check_pairing(frame: pd.DataFrame) -> None:
    duplicated = frame[frame.duplicated(["eye_id", "rater"], keep=False)]
    if not duplicated.empty:
        ids = sorted(set(duplicated["eye_id"]))
        raise PairingError(f"duplicate rows for eyes: {', '.join(ids)}", ids)
    manual = set(frame.loc[frame["rater"] == "manual", "eye_id"])
    automated = set(frame.loc[frame["rater"] == "automated", "eye_id"])
    if manual and automated and manual != automated:
        ids = sorted(manual ^ automated)
        raise PairingError(f"eyes missing a rater pairing: {', '.join(ids)}", ids)
    cohorts = frame.groupby("eye_id")["cohort"].nunique()
    mixed = sorted(cohorts[cohorts > 1].index)
    if mixed:
        raise PairingError(f"eyes listed under more than one cohort: {', '.join(mixed)}", mixed)


def cohort_summary(
    rows: Union[pd.DataFrame, Sequence[MetricsRow]], grouping: str = "cohort"
) -> CohortReport:
    """
    Summary of per-eye metric rows by group and rater.

    Per group and rater: mean ± sample SD of every metric. When both raters
    are present: paired t-test and ICC(A,1) per group. Between groups: Welch
    t-test on automated rows (manual rows when no automated rows exist).

    Args:
        rows: Metrics rows (CSV schema)
        grouping: Column that defines the groups

    Returns:
        CohortReport with deterministic ordering

    Raises:
        PairingError: an eye lacks its counterpart in the other rater column
    """
    frame = rows_frame(rows)
    if grouping not in frame.columns:
        raise ArgumentError(f"unknown grouping column {grouping!r}")
    if frame.empty:
        raise ArgumentError("no metric rows to summarise")
    _check_pairing(frame)
    frame = frame.sort_values([grouping, "rater", "eye_id"], kind="mergesort")
    report = CohortReport(grouping=grouping)
    groups = sorted(frame[grouping].unique())
    raters = sorted(frame["rater"].unique())

    for group in groups:
        for rater in raters:
            cell = frame[(frame[grouping] == group) & (frame["rater"] == rater)]
            if cell.empty:
                continue
            for metric in METRICS:
                report.cells.append(
                    CellSummary(cohort=group, rater=rater, metric=metric, summary=describe(cell[metric]))
                )

    if raters == ["automated", "manual"]:
        for group in groups:
            members = frame[frame[grouping] == group]
            manual = members[members["rater"] == "manual"].set_index("eye_id").sort_index()
            automated = members[members["rater"] == "automated"].set_index("eye_id").sort_index()
            for metric in METRICS:
                report.agreement.append(_agreement(group, metric, manual[metric], automated[metric]))

    rater = "automated" if "automated" in raters else "manual"
    subset = frame[frame["rater"] == rater]
    for first, second in itertools.combinations(groups, 2):
        for metric in METRICS:
            x = subset.loc[subset[grouping] == first, metric].to_numpy()
            y = subset.loc[subset[grouping] == second, metric].to_numpy()
            comparison = CohortComparison(metric=metric, rater=rater, cohorts=(first, second))
            try:
                comparison.welch = welch_t(x, y)
            except (ArgumentError, DegenerateSampleError) as e:
                comparison.note = str(e)
            report.comparisons.append(comparison)
    logger.info(f"Summarised {len(frame)} rows in {len(groups)} groups")
    return report


def _agreement(group: str, metric: str, manual: pd.Series, automated: pd.Series) -> RaterAgreement:
    result = RaterAgreement(cohort=group, metric=metric, n=len(manual))
    if len(manual) < 2:
        result.paired_t_note = result.icc_note = "fewer than 2 paired eyes"
        return result
    sample = PairedSample(values_a=manual.tolist(), values_b=automated.tolist())
    try:
        result.paired_t = paired_t(sample)
    except DegenerateSampleError:
        result.paired_t_note = "degenerate: zero-variance differences"
    try:
        result.icc = icc(sample)
    except DegenerateSampleError:
        result.icc_note = "degenerate: zero total variance"
    return result


def render_table(report: CohortReport) -> str:
    """Aligned text table: one block per group with rater columns, T-test p and ICC rows."""
    lines = [f"{REPORT_SCHEMA}  {report.icc_form}; two-tailed p; sample SD", ""]
    cells = {(c.cohort, c.rater, c.metric): c.summary for c in report.cells}
    agreement = {(a.cohort, a.metric): a for a in report.agreement}
    groups = sorted({c.cohort for c in report.cells})
    raters = sorted({c.rater for c in report.cells}, key=lambda r: (r != "manual", r))

    for group in groups:
        table: dict[str, list[str]] = {}
        n = None
        for rater in raters:
            column = []
            for metric in METRICS:
                summary = cells.get((group, rater, metric))
                column.append(str(summary) if summary else "-")
                n = n or (summary.n if summary else None)
            table[rater.capitalize()] = column
        if report.agreement:
            table["T-test"] = [_format_p(agreement.get((group, m))) for m in METRICS]
            table["ICC"] = [_format_icc(agreement.get((group, m))) for m in METRICS]
        frame = pd.DataFrame(table, index=[METRIC_LABELS[m] for m in METRICS]).T
        lines.append(f"{group.capitalize()} (n = {n})")
        lines.append(frame.to_string())
        lines.append("")

    if report.comparisons:
        rows = []
        for c in report.comparisons:
            if c.welch is None:
                rows.append([METRIC_LABELS[c.metric], f"{c.cohorts[0]} vs {c.cohorts[1]}", "-", "-", c.note or ""])
            else:
                rows.append(
                    [
                        METRIC_LABELS[c.metric],
                        f"{c.cohorts[0]} vs {c.cohorts[1]}",
                        f"{c.welch.statistic:.3f}",
                        f"{c.welch.degrees_of_freedom:.1f}",
                        f"p = {c.welch.p_value:.3f}",
                    ]
                )
        rater = report.comparisons[0].rater
        lines.append(f"Between groups ({rater}, Welch t-test)")
        lines.append(pd.DataFrame(rows, columns=["metric", "groups", "t", "df", "p"]).to_string(index=False))
        lines.append("")
    return "\n".join(lines)


def _format_p(agreement: Optional[RaterAgreement]) -> str:
    if agreement is None:
        return "-"
    if agreement.paired_t is None:
        return "degenerate" if agreement.paired_t_note and "degenerate" in agreement.paired_t_note else "-"
    return f"p = {agreement.paired_t.p_value:.2f}"


def _format_icc(agreement: Optional[RaterAgreement]) -> str:
    if agreement is None or agreement.icc is None:
        return "-"
    return f"{agreement.icc:.2f}"


# Resampled cohorts


class NormalSpec(BaseModel):
    mean: float
    sd: float = Field(ge=0)


class CohortDistribution(BaseModel):
    """Per-metric normal distributions of one cohort (mean ± SD)."""

    area_mm2: NormalSpec
    d_min_mm: NormalSpec
    d_max_mm: NormalSpec
    eccentricity: NormalSpec
    density: NormalSpec


METRIC_BOUNDS = {
    "area_mm2": (1e-6, np.inf),
    "d_min_mm": (1e-6, np.inf),
    "d_max_mm": (1e-6, np.inf),
    "eccentricity": (0.0, 0.999),
    "density": (1e-3, 0.999),
}


def draw_truncated(spec: NormalSpec, bounds: tuple[float, float], size: int, rng: np.random.Generator) -> np.ndarray:
    """Normal draws truncated to ``bounds``."""
    if spec.sd == 0:
        return np.full(size, float(np.clip(spec.mean, *bounds)))
    low = (bounds[0] - spec.mean) / spec.sd
    high = (bounds[1] - spec.mean) / spec.sd
    return truncnorm.rvs(low, high, loc=spec.mean, scale=spec.sd, size=size, random_state=rng)


def resample_significance(
    first: CohortDistribution,
    second: CohortDistribution,
    n_first: int,
    n_second: int,
    resamples: int = 100,
    seed: int = 0,
) -> dict[str, float]:
    """
    Fraction of simulated cohort pairs whose Welch p-value is below 0.05, per metric.

    Args:
        first, second: Metric distributions of the two cohorts
        n_first, n_second: Eyes per cohort
        resamples: Number of simulated cohort pairs
        seed: RNG seed

    Returns:
        Metric -> fraction of significant resamples
    """
    if n_first < 2 or n_second < 2 or resamples < 1:
        raise ArgumentError("need >= 2 eyes per cohort and >= 1 resample")
    rng = np.random.default_rng(seed)
    hits = dict.fromkeys(METRICS, 0)
    for _ in range(resamples):
        for metric in METRICS:
            bounds = METRIC_BOUNDS[metric]
            x = draw_truncated(getattr(first, metric), bounds, n_first, rng)
            y = draw_truncated(getattr(second, metric), bounds, n_second, rng)
            if welch_t(x, y).p_value < SIGNIFICANCE:
                hits[metric] += 1
    return {metric: hits[metric] / resamples for metric in METRICS}
