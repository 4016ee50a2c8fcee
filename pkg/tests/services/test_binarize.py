"""Tests for Otsu thresholding, gamma correction and FAZ cleanup."""

import numpy as np
import pytest

from octa.exceptions import ArgumentError, DegenerateHistogramError
from octa.services.binarize import (
    density_mask,
    faz_cleanup,
    gamma_correct,
    otsu,
    otsu_from_histogram,
    quantize,
    threshold_map,
)
from octa.services.segnet import ConfidenceMap
from octa.utils.raster import BinaryMask, Region, RoiMask, icon_roi


def _brute_force_otsu(hist):
    total = hist.sum()
    levels = np.arange(256)
    best, best_var = None, -1.0
    for t in range(255):
        w0, w1 = hist[: t + 1].sum(), hist[t + 1 :].sum()
        if w0 == 0 or w1 == 0:
            continue
        mu0 = (hist[: t + 1] * levels[: t + 1]).sum() / w0
        mu1 = (hist[t + 1 :] * levels[t + 1 :]).sum() / w1
        var = (w0 / total) * (w1 / total) * (mu0 - mu1) ** 2
        if var > best_var:
            best, best_var = t, var
    return best, best_var


def _map(values, roi=None) -> ConfidenceMap:
    values = np.asarray(values, dtype=float)
    return ConfidenceMap(values=values, roi=roi or RoiMask.full(*values.shape))


def test_quantize_boundary_rule():
    """Test that v > (t + 0.5) / 255 exactly when bin(v) > t."""
    t = 100
    edge = (t + 0.5) / 255
    assert quantize(np.array([edge - 1e-9]))[0] == t
    assert quantize(np.array([edge + 1e-9]))[0] == t + 1
    np.testing.assert_array_equal(quantize(np.array([0.0, 1.0])), [0, 255])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_otsu_matches_brute_force(seed):
    """Test the vectorised search against a per-boundary loop."""
    hist = np.random.default_rng(seed).integers(0, 1000, 256)
    boundary, variance = otsu_from_histogram(hist)
    expected_boundary, expected_variance = _brute_force_otsu(hist)
    assert boundary == expected_boundary
    assert variance == pytest.approx(expected_variance, rel=1e-9)


@pytest.mark.slow
def test_otsu_matches_brute_force_on_many_histograms():
    """Test 1000 dense and sparse random histograms and 100 random maps against the loop."""
    rng = np.random.default_rng(2024)
    checked = 0
    for i in range(1000):
        hist = rng.integers(0, 1000, 256)
        if i % 2:
            hist = hist * (rng.random(256) < 0.05)
        if np.count_nonzero(hist) < 2:
            continue
        boundary, variance = otsu_from_histogram(hist)
        expected_boundary, expected_variance = _brute_force_otsu(hist)
        assert boundary == expected_boundary
        assert variance == pytest.approx(expected_variance, rel=1e-12)
        checked += 1
    assert checked > 900

    for _ in range(100):
        cmap = _map(rng.random((20, 20)) ** rng.uniform(0.3, 3.0))
        result = otsu(cmap)
        hist = np.bincount(quantize(cmap.values.ravel()), minlength=256)
        expected_boundary, expected_variance = _brute_force_otsu(hist)
        assert result.boundary == expected_boundary
        assert result.inter_class_variance == pytest.approx(expected_variance, rel=1e-12)
        mask = threshold_map(cmap, result.threshold)
        np.testing.assert_array_equal(mask.vessel, quantize(cmap.values) > result.boundary)


def test_otsu_ties_pick_lowest_boundary():
    """Test that every boundary between two spikes ties and the lowest wins."""
    hist = np.zeros(256, dtype=int)
    hist[50] = 30
    hist[200] = 30
    assert otsu_from_histogram(hist)[0] == 50


def test_otsu_degenerate_histogram():
    """Test single-bin and malformed histograms."""
    hist = np.zeros(256, dtype=int)
    hist[7] = 10
    with pytest.raises(DegenerateHistogramError):
        otsu_from_histogram(hist)
    with pytest.raises(ArgumentError):
        otsu_from_histogram(np.ones(10))


def test_otsu_on_confidence_map_ignores_outside_roi():
    """Test threshold placement on a two-level map."""
    roi = icon_roi(8, 8, 2, 2)
    values = np.where(np.arange(64).reshape(8, 8) % 2 == 0, 51 / 255, 204 / 255)
    cmap = _map(values, roi)
    result = otsu(cmap)
    assert result.boundary == 51
    assert result.threshold == pytest.approx(51.5 / 255)
    assert sum(result.histogram) == roi.count

    mask = threshold_map(cmap, result.threshold)
    np.testing.assert_array_equal(mask.vessel, (values > 0.5) & roi.included)


def test_threshold_map_is_strict():
    """Test that a value equal to the threshold stays background."""
    mask = threshold_map(_map([[0.3, 0.5, 0.7]]), 0.5)
    np.testing.assert_array_equal(mask.vessel, [[False, False, True]])
    with pytest.raises(ArgumentError):
        threshold_map(_map([[0.3]]), 1.5)


def test_gamma_correct():
    """Test per-value power mapping and parameter validation."""
    corrected = gamma_correct(_map([[0.25, 0.81]]), 0.5)
    np.testing.assert_allclose(corrected.values, [[0.5, 0.9]])
    with pytest.raises(ArgumentError):
        gamma_correct(_map([[0.25]]), 0.0)


def test_density_mask_keeps_mid_confidence_pixels():
    """Test that gamma < 1 moves mid-confidence pixels into the vessel class."""
    values = np.repeat([0.0001, 0.49, 1.0], 100).reshape(30, 10)
    cmap = _map(values)
    plain = threshold_map(cmap, otsu(cmap).threshold)
    assert plain.vessel_count == 100
    assert density_mask(cmap, gamma=0.5).vessel_count == 200


def test_faz_cleanup_clears_region():
    """Test that FAZ pixels are forced to non-vessel."""
    vessel = np.ones((5, 5), dtype=bool)
    mask = BinaryMask(vessel=vessel, roi=RoiMask.full(5, 5))
    faz = Region(pixels=[(2, 2), (2, 3)], image_shape=(5, 5))
    cleaned = faz_cleanup(mask, faz)
    assert cleaned.vessel_count == 23
    assert not cleaned.vessel[2, 2]
    assert mask.vessel[2, 2]


def test_faz_cleanup_rejects_region_outside_roi():
    """Test region checks."""
    mask = BinaryMask(vessel=np.zeros((4, 4), dtype=bool), roi=icon_roi(4, 4, 2, 2))
    with pytest.raises(ArgumentError):
        faz_cleanup(mask, Region(pixels=[(3, 0)], image_shape=(4, 4)))
    with pytest.raises(ArgumentError):
        faz_cleanup(mask, Region(pixels=[(0, 0)], image_shape=(5, 5)))
