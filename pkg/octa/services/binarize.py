"""Confidence map binarization: Otsu threshold, gamma correction and FAZ cleanup."""

import logging

import numpy as np
from pydantic import BaseModel, Field

from octa.exceptions import ArgumentError, DegenerateHistogramError
from octa.services.segnet import ConfidenceMap
from octa.utils.raster import BinaryMask, Region

logger = logging.getLogger(__name__)

BINS = 256


class OtsuResult(BaseModel):
    threshold: float = Field(ge=0, le=1, description="Upper edge of the last background bin")
    boundary: int = Field(ge=0, le=BINS - 2, description="Last bin index of the background class")
    inter_class_variance: float = Field(ge=0)
    histogram: list[int] = Field(description="256 bin counts over the ROI")


def quantize(values: np.ndarray) -> np.ndarray:
    """Bin index 0..255 such that ``v > (t + 0.5) / 255`` iff ``bin(v) > t``."""
    return np.clip(np.ceil(np.asarray(values) * (BINS - 1) - 0.5), 0, BINS - 1).astype(np.int64)


def otsu_from_histogram(hist: np.ndarray) -> tuple[int, float]:
    """
    Exhaustive Otsu search over the 255 boundaries of a 256-bin histogram.

    Args:
        hist: Integer counts per bin

    Returns:
        (boundary, between-class variance); the lowest boundary wins ties

    Raises:
        DegenerateHistogramError: fewer than two occupied bins
    """
    hist = np.asarray(hist, dtype=np.int64)
    if hist.shape != (BINS,):
        raise ArgumentError(f"histogram must have {BINS} bins, got {hist.shape}")
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogramError("histogram occupies a single bin")
    levels = np.arange(BINS, dtype=np.int64)
    total = int(hist.sum())
    weighted_total = int((hist * levels).sum())
    w0 = np.cumsum(hist)[:-1]
    s0 = np.cumsum(hist * levels)[:-1]
    w1 = total - w0
    s1 = weighted_total - s0
    valid = (w0 > 0) & (w1 > 0)

    variance = np.full(BINS - 1, -1.0)
    mu0 = s0[valid] / w0[valid]
    mu1 = s1[valid] / w1[valid]
    diff = mu0 - mu1
    variance[valid] = (w0[valid] / total) * (w1[valid] / total) * diff * diff
    boundary = int(np.argmax(variance))
    return boundary, float(variance[boundary])


def otsu(cmap: ConfidenceMap) -> OtsuResult:
    """Otsu threshold of the ROI values of a confidence map."""
    hist = np.bincount(quantize(cmap.roi_values()), minlength=BINS)
    boundary, variance = otsu_from_histogram(hist)
    threshold = (boundary + 0.5) / (BINS - 1)
    logger.debug(f"Otsu threshold {threshold:.4f} (bin {boundary})")
    return OtsuResult(
        threshold=threshold,
        boundary=boundary,
        inter_class_variance=variance,
        histogram=hist.tolist(),
    )


def threshold_map(cmap: ConfidenceMap, t: float) -> BinaryMask:
    """Vessel where the value is strictly above ``t``, inside the ROI."""
    if not 0.0 <= t <= 1.0:
        raise ArgumentError(f"threshold must lie in [0, 1], got {t}")
    return BinaryMask(vessel=cmap.values > t, roi=cmap.roi)


def gamma_correct(cmap: ConfidenceMap, gamma: float) -> ConfidenceMap:
    """Map every ROI value v to v ** gamma."""
    if not gamma > 0:
        raise ArgumentError(f"gamma must be positive, got {gamma}")
    return ConfidenceMap(
        values=np.power(cmap.values, gamma),
        roi=cmap.roi,
        scale_mm_per_px=cmap.scale_mm_per_px,
    )


def density_mask(cmap: ConfidenceMap, gamma: float = 0.5) -> BinaryMask:
    """Gamma-correct, then re-run Otsu on the corrected map."""
    corrected = gamma_correct(cmap, gamma)
    return threshold_map(corrected, otsu(corrected).threshold)


def faz_cleanup(mask: BinaryMask, faz: Region) -> BinaryMask:
    """Force every FAZ pixel to non-vessel."""
    if faz.image_shape != mask.shape:
        raise ArgumentError(f"FAZ region shape {faz.image_shape} does not match mask {mask.shape}")
    rows, cols = faz.pixels[:, 0], faz.pixels[:, 1]
    if not mask.roi.included[rows, cols].all():
        raise ArgumentError("FAZ region extends outside the ROI")
    vessel = mask.vessel.copy()
    removed = int(vessel[rows, cols].sum())
    vessel[rows, cols] = False
    if removed:
        logger.debug(f"FAZ cleanup removed {removed} vessel pixels")
    return BinaryMask(vessel=vessel, roi=mask.roi)
