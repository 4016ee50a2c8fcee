"""Tests for cohort statistics and the cohort report."""

import json

import numpy as np
import pytest
from scipy import stats as scipy_stats

from octa.exceptions import ArgumentError, DegenerateSampleError, PairingError
from octa.models import MetricsRow
from octa.services.stats import (
    METRIC_BOUNDS,
    REPORT_SCHEMA,
    CohortDistribution,
    NormalSpec,
    PairedSample,
    cohort_summary,
    describe,
    draw_truncated,
    icc,
    paired_t,
    render_table,
    resample_significance,
    t_cdf,
    welch_t,
)

MANUAL = [0.30, 0.25, 0.41, 0.35, 0.28, 0.33]
AUTOMATED = [0.31, 0.27, 0.40, 0.38, 0.27, 0.36]


def _icc_oracle(a, b) -> float:
    """Two-way ANOVA mean squares accumulated with explicit loops."""
    table = [[x, y] for x, y in zip(a, b)]
    n, k = len(table), 2
    grand = sum(sum(row) for row in table) / (n * k)
    row_means = [sum(row) / k for row in table]
    col_means = [sum(table[i][j] for i in range(n)) / n for j in range(k)]
    ss_r = sum(k * (m - grand) ** 2 for m in row_means)
    ss_c = sum(n * (m - grand) ** 2 for m in col_means)
    ss_e = 0.0
    for i in range(n):
        for j in range(k):
            ss_e += (table[i][j] - row_means[i] - col_means[j] + grand) ** 2
    ms_r, ms_c, ms_e = ss_r / (n - 1), ss_c / (k - 1), ss_e / ((n - 1) * (k - 1))
    return (ms_r - ms_e) / (ms_r + (k - 1) * ms_e + k / n * (ms_c - ms_e))


def _rows(cohort, prefix, n, area_shift=0.0, rater_shift=0.01):
    rows = []
    for i in range(n):
        base = dict(
            area_mm2=0.30 + area_shift + 0.02 * i,
            d_min_mm=0.50 + 0.01 * i,
            d_max_mm=0.70 + 0.015 * i,
            eccentricity=0.60 + 0.02 * i,
            density=0.45 - 0.01 * i,
        )
        rows.append(MetricsRow(eye_id=f"{prefix}{i}", cohort=cohort, rater="manual", **base))
        shifted = {key: value + rater_shift * ((i % 3) - 1) for key, value in base.items()}
        rows.append(MetricsRow(eye_id=f"{prefix}{i}", cohort=cohort, rater="automated", **shifted))
    return rows


@pytest.mark.parametrize("t", [-2.5, 0.0, 0.7, 4.0])
@pytest.mark.parametrize("df", [1.0, 3.7, 30.0])
def test_t_cdf_matches_scipy(t, df):
    """Test the incomplete-beta CDF against scipy's t distribution."""
    assert t_cdf(t, df) == pytest.approx(scipy_stats.t.cdf(t, df), abs=1e-12)


def test_t_cdf_rejects_bad_df():
    """Test degrees-of-freedom validation."""
    with pytest.raises(ArgumentError):
        t_cdf(1.0, 0.0)


def test_paired_t_matches_scipy():
    """Test statistic, df and two-tailed p against ttest_rel."""
    result = paired_t(PairedSample(values_a=MANUAL, values_b=AUTOMATED))
    expected = scipy_stats.ttest_rel(MANUAL, AUTOMATED)
    assert result.statistic == pytest.approx(expected.statistic, rel=1e-10)
    assert result.degrees_of_freedom == len(MANUAL) - 1
    assert result.p_value == pytest.approx(expected.pvalue, rel=1e-9)


def test_paired_t_degenerate_differences():
    """Test that constant differences are refused."""
    with pytest.raises(DegenerateSampleError):
        paired_t(PairedSample(values_a=[1.0, 2.0, 3.0], values_b=[0.5, 1.5, 2.5]))


def test_paired_sample_validation():
    """Test length and size checks."""
    with pytest.raises(ValueError):
        PairedSample(values_a=[1.0, 2.0], values_b=[1.0])
    with pytest.raises(ValueError):
        PairedSample(values_a=[1.0], values_b=[1.0])


def test_welch_t_matches_scipy():
    """Test Welch's statistic and p-value against ttest_ind(equal_var=False)."""
    x = [0.31, 0.28, 0.35, 0.40, 0.29]
    y = [0.45, 0.52, 0.38, 0.61, 0.49, 0.57, 0.44]
    result = welch_t(x, y)
    expected = scipy_stats.ttest_ind(x, y, equal_var=False)
    assert result.statistic == pytest.approx(expected.statistic, rel=1e-10)
    assert result.p_value == pytest.approx(expected.pvalue, rel=1e-9)
    assert result.degrees_of_freedom < len(x) + len(y) - 2


def test_welch_t_density_gap():
    """Test a healthy/diabetic density gap and the symmetry of the statistic."""
    x = [0.49, 0.51, 0.50, 0.52, 0.48]
    y = [0.38, 0.40, 0.37, 0.42]
    result = welch_t(x, y)
    expected = scipy_stats.ttest_ind(x, y, equal_var=False)
    assert result.p_value < 0.05
    assert result.statistic == pytest.approx(expected.statistic, abs=1e-6)
    assert result.p_value == pytest.approx(expected.pvalue, abs=1e-6)

    swapped = welch_t(y, x)
    assert swapped.statistic == pytest.approx(-result.statistic)
    assert swapped.p_value == pytest.approx(result.p_value)


def test_welch_t_degenerate_and_small():
    """Test zero-variance and undersized groups."""
    with pytest.raises(DegenerateSampleError):
        welch_t([1.0, 1.0], [2.0, 2.0])
    with pytest.raises(ArgumentError):
        welch_t([1.0], [2.0, 3.0])


def test_icc_matches_loop_oracle():
    """Test ICC(A,1) against explicit ANOVA sums."""
    sample = PairedSample(values_a=MANUAL, values_b=AUTOMATED)
    assert icc(sample) == pytest.approx(_icc_oracle(MANUAL, AUTOMATED), rel=1e-12)


def test_icc_perfect_and_offset_agreement():
    """Test that identical ratings give 1 and a constant offset lowers absolute agreement."""
    assert icc(PairedSample(values_a=MANUAL, values_b=MANUAL)) == pytest.approx(1.0)
    offset = [v + 0.05 for v in MANUAL]
    assert icc(PairedSample(values_a=MANUAL, values_b=offset)) < 1.0
    with pytest.raises(DegenerateSampleError):
        icc(PairedSample(values_a=[0.3, 0.3], values_b=[0.3, 0.3]))


def test_describe_uses_sample_sd():
    """Test mean and n-1 standard deviation."""
    summary = describe([1.0, 2.0, 3.0])
    assert summary.mean == 2.0
    assert summary.sd == pytest.approx(1.0)
    assert str(summary) == "2.000 ± 1.000"
    assert describe([4.0]).sd is None
    with pytest.raises(ArgumentError):
        describe([])


def test_cohort_summary_structure():
    """Test cell, agreement and comparison counts with deterministic order."""
    rows = _rows("healthy", "h", 4) + _rows("diabetic", "d", 4, area_shift=0.2)
    report = cohort_summary(rows)
    assert len(report.cells) == 2 * 2 * 5
    assert report.cells[0].cohort == "diabetic"
    assert report.cells[0].rater == "automated"
    assert len(report.agreement) == 2 * 5
    assert all(a.n == 4 for a in report.agreement)
    assert len(report.comparisons) == 5
    area = next(c for c in report.comparisons if c.metric == "area_mm2")
    assert area.cohorts == ("diabetic", "healthy")
    assert area.rater == "automated"
    assert area.welch.p_value < 0.05


def test_cohort_summary_manual_only_has_no_agreement():
    """Test that single-rater input skips paired statistics."""
    rows = [r for r in _rows("healthy", "h", 3) + _rows("diabetic", "d", 3) if r.rater == "manual"]
    report = cohort_summary(rows)
    assert report.agreement == []
    assert report.comparisons[0].rater == "manual"


def test_cohort_summary_pairing_errors():
    """Test missing raters, duplicates and eyes in two cohorts."""
    rows = _rows("healthy", "h", 3)
    with pytest.raises(PairingError) as exc:
        cohort_summary(rows[:-1])
    assert exc.value.eye_ids == ["h2"]

    with pytest.raises(PairingError):
        cohort_summary(rows + [rows[0]])

    moved = rows[1].model_copy(update={"cohort": "diabetic"})
    with pytest.raises(PairingError) as exc:
        cohort_summary([rows[0], moved] + rows[2:])
    assert exc.value.eye_ids == ["h0"]


def test_report_json_and_table():
    """Test the serialised report and the rendered text table."""
    report = cohort_summary(_rows("healthy", "h", 3) + _rows("diabetic", "d", 3, area_shift=0.1))
    payload = json.loads(report.to_json())
    assert payload["schema"] == REPORT_SCHEMA
    assert payload["tails"] == 2
    assert payload["sd_convention"] == "sample (n-1)"

    table = render_table(report)
    assert "Healthy (n = 3)" in table
    assert "Diabetic (n = 3)" in table
    assert "T-test" in table
    assert "ICC" in table
    assert "Welch t-test" in table


def test_draw_truncated_respects_bounds():
    """Test that truncated draws never leave their interval."""
    rng = np.random.default_rng(0)
    draws = draw_truncated(NormalSpec(mean=0.95, sd=0.1), METRIC_BOUNDS["eccentricity"], 500, rng)
    assert draws.min() >= 0.0
    assert draws.max() <= 0.999
    fixed = draw_truncated(NormalSpec(mean=2.0, sd=0.0), (0.0, 1.0), 3, rng)
    np.testing.assert_array_equal(fixed, [1.0, 1.0, 1.0])


def _distribution(area, ecc):
    return CohortDistribution(
        area_mm2=NormalSpec(mean=area, sd=0.02),
        d_min_mm=NormalSpec(mean=0.5, sd=0.05),
        d_max_mm=NormalSpec(mean=0.7, sd=0.05),
        eccentricity=NormalSpec(mean=ecc, sd=0.02),
        density=NormalSpec(mean=0.45, sd=0.03),
    )


def test_resample_significance_separates_distinct_metrics():
    """Test that well-separated metrics are always significant and equal ones rarely are."""
    fractions = resample_significance(
        _distribution(0.2, 0.5), _distribution(0.4, 0.8), n_first=10, n_second=10, resamples=40, seed=1
    )
    assert fractions["area_mm2"] == 1.0
    assert fractions["eccentricity"] == 1.0
    assert fractions["density"] < 0.3
    with pytest.raises(ArgumentError):
        resample_significance(_distribution(0.2, 0.5), _distribution(0.2, 0.5), 1, 5)
