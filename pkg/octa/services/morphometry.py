"""FAZ extraction and clinical outcome measures."""

import logging
import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field
from scipy import ndimage
from skimage import measure

from octa.exceptions import ArgumentError, CentroidOutsideError, EmptyFazError
from octa.models import MetricsRow, Rater
from octa.services.binarize import faz_cleanup
from octa.utils.raster import BinaryMask, Region

logger = logging.getLogger(__name__)

MARCH_STEP = 0.25
BOUNDARY_SMOOTHING = 1.0

# 8-neighbourhood, clockwise on screen (rows grow downward), starting west
_RING = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]


class Diameters(BaseModel):
    """Extreme chords through the centroid, in pixels and degrees."""

    d_min: float = Field(gt=0)
    d_max: float = Field(gt=0)
    theta_min: float
    theta_max: float
    min_chord: tuple[tuple[float, float], tuple[float, float]] = Field(description="(x, y) endpoints")
    max_chord: tuple[tuple[float, float], tuple[float, float]] = Field(description="(x, y) endpoints")


class FazMetrics(BaseModel):
    area_mm2: float = Field(ge=0)
    d_min_mm: float = Field(gt=0)
    d_max_mm: float = Field(gt=0)
    eccentricity: float = Field(ge=0, lt=1)
    centroid: tuple[float, float] = Field(description="(x, y) in pixels")
    theta_min: float
    theta_max: float
    perimeter: list[tuple[int, int]] = Field(description="Ordered 8-connected boundary, (x, y)")
    vessel_density: float = Field(ge=0, le=1)
    faz_pixels: int = Field(ge=1)
    diameters_px: Diameters


def largest_nonvessel_component(mask: BinaryMask) -> Region:
    """
    Largest 4-connected component of non-vessel ROI pixels.

    Equal sizes are resolved by the component whose centroid lies nearest the
    image centre.

    Raises:
        EmptyFazError: no non-vessel pixel inside the ROI
    """
    labels = measure.label(mask.nonvessel, connectivity=1)
    props = measure.regionprops(labels)
    if not props:
        raise EmptyFazError("mask has no non-vessel pixel inside the ROI")
    h, w = mask.shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    largest = max(p.area for p in props)
    candidates = [p for p in props if p.area == largest]
    best = min(candidates, key=lambda p: (float(np.hypot(*(np.array(p.centroid) - centre))), p.label))
    if len(candidates) > 1:
        logger.debug(f"{len(candidates)} components of {largest} px; kept the one nearest the centre")
    return Region(pixels=best.coords, image_shape=mask.shape)


def centroid(r: Region) -> tuple[float, float]:
    """Mean pixel position as (x, y)."""
    mean = r.pixels.mean(axis=0)
    return float(mean[1]), float(mean[0])


def _angles(step_deg: float) -> np.ndarray:
    count = int(math.ceil(180.0 / step_deg - 1e-9))
    return np.arange(count) * step_deg


def diameters(r: Region, c: tuple[float, float], step_deg: float = 1.0) -> Diameters:
    """
    Sweep chords through ``c`` every ``step_deg`` degrees over [0, 180).

    Each half-chord marches outward in 0.25 px steps over a Gaussian-smoothed
    (sigma 1 px) indicator of the region, sampled bilinearly; the boundary
    sits midway between the last inside and first outside sample.

    Args:
        r: FAZ region
        c: Centroid (x, y); its pixel must belong to the region
        step_deg: Angular step in (0, 5]

    Returns:
        Diameters in pixels; ties go to the smaller angle

    Raises:
        CentroidOutsideError: the centroid pixel is not part of the region
    """
    if not 0 < step_deg <= 5:
        raise ArgumentError(f"step_deg must lie in (0, 5], got {step_deg}")
    cx, cy = c
    mask = r.mask
    row, col = int(math.floor(cy + 0.5)), int(math.floor(cx + 0.5))
    h, w = r.image_shape
    if not (0 <= row < h and 0 <= col < w and mask[row, col]):
        raise CentroidOutsideError(f"centroid ({cx:.1f}, {cy:.1f}) lies outside the FAZ", region=r)

    indicator = ndimage.gaussian_filter(mask.astype(np.float64), BOUNDARY_SMOOTHING, mode="constant")
    min_row, min_col, max_row, max_col = r.bbox
    reach = max(math.hypot(x - cx, y - cy) for x in (min_col, max_col) for y in (min_row, max_row)) + 4
    steps = np.arange(1, int(math.ceil(reach / MARCH_STEP)) + 1) * MARCH_STEP

    thetas = _angles(step_deg)
    directions = np.deg2rad(np.concatenate([thetas, thetas + 180.0]))
    xs = cx + np.cos(directions)[:, None] * steps[None, :]
    ys = cy + np.sin(directions)[:, None] * steps[None, :]
    inside = (
        ndimage.map_coordinates(indicator, [ys.ravel(), xs.ravel()], order=1, mode="constant", cval=0.0)
        .reshape(xs.shape)
        >= 0.5
    )
    first_out = np.argmax(~inside, axis=1)
    radii = steps[first_out] - MARCH_STEP / 2

    n = len(thetas)
    forward, backward = radii[:n], radii[n:]
    chords = forward + backward
    i_max = int(np.argmax(chords))
    i_min = int(np.argmin(chords))

    def endpoints(i: int):
        dx, dy = math.cos(math.radians(thetas[i])), math.sin(math.radians(thetas[i]))
        return (
            (cx + forward[i] * dx, cy + forward[i] * dy),
            (cx - backward[i] * dx, cy - backward[i] * dy),
        )

    return Diameters(
        d_min=float(chords[i_min]),
        d_max=float(chords[i_max]),
        theta_min=float(thetas[i_min]),
        theta_max=float(thetas[i_max]),
        min_chord=endpoints(i_min),
        max_chord=endpoints(i_max),
    )


def eccentricity(d_min: float, d_max: float) -> float:
    """sqrt(1 - (d_min / d_max)^2)."""
    if not (0 < d_min <= d_max):
        raise ArgumentError(f"need 0 < d_min <= d_max, got d_min={d_min}, d_max={d_max}")
    return math.sqrt(1.0 - (d_min / d_max) ** 2)


def area_mm2(r: Region, scale: float) -> float:
    if not scale > 0:
        raise ArgumentError(f"scale must be positive, got {scale}")
    return r.size * scale * scale


def vessel_density(mask: BinaryMask) -> float:
    """Vessel pixels over all ROI pixels (FAZ included in the denominator)."""
    return mask.vessel_count / mask.roi.count


def trace_perimeter(r: Region) -> list[tuple[int, int]]:
    """Moore-neighbour trace of the region's outer boundary as (x, y) pixels, clockwise."""
    min_row, min_col, max_row, max_col = r.bbox
    local = np.zeros((max_row - min_row + 3, max_col - min_col + 3), dtype=bool)
    local[r.pixels[:, 0] - min_row + 1, r.pixels[:, 1] - min_col + 1] = True

    start = tuple(int(v) for v in np.argwhere(local)[0])
    contour = [start]
    current, back = start, 0
    second = None
    for _ in range(8 * r.size + 8):
        for k in range(1, 9):
            idx = (back + k) % 8
            nxt = (current[0] + _RING[idx][0], current[1] + _RING[idx][1])
            if local[nxt]:
                break
        else:
            break  # isolated pixel
        prev = _RING[(back + k - 1) % 8]
        back = _RING.index((current[0] + prev[0] - nxt[0], current[1] + prev[1] - nxt[1]))
        if second is None:
            second = nxt
        elif current == start and nxt == second:
            break
        contour.append(nxt)
        current = nxt
    if len(contour) > 1 and contour[-1] == start:
        contour.pop()
    return [(c - 1 + min_col, rr - 1 + min_row) for rr, c in contour]


def quantify(
    mask: BinaryMask,
    scale: float,
    step_deg: float = 1.0,
    density_source: Optional[BinaryMask] = None,
) -> FazMetrics:
    """
    Full chain: FAZ component, cleanup, centroid, diameters, eccentricity, area, density.

    Args:
        mask: Binary mask the FAZ is extracted from
        scale: Pixel size in mm/px
        step_deg: Angular step of the diameter sweep
        density_source: Mask used for density (e.g. the gamma path); defaults to ``mask``

    Returns:
        FazMetrics
    """
    if not scale > 0:
        raise ArgumentError(f"scale must be positive, got {scale}")
    faz = largest_nonvessel_component(mask)
    density_mask = faz_cleanup(density_source if density_source is not None else mask, faz)
    c = centroid(faz)
    d = diameters(faz, c, step_deg)
    return FazMetrics(
        area_mm2=area_mm2(faz, scale),
        d_min_mm=d.d_min * scale,
        d_max_mm=d.d_max * scale,
        eccentricity=eccentricity(d.d_min, d.d_max),
        centroid=c,
        theta_min=d.theta_min,
        theta_max=d.theta_max,
        perimeter=trace_perimeter(faz),
        vessel_density=vessel_density(density_mask),
        faz_pixels=faz.size,
        diameters_px=d,
    )


def metrics_row(eye_id: str, cohort: str, rater: Rater, metrics: FazMetrics) -> MetricsRow:
    return MetricsRow(
        eye_id=eye_id,
        cohort=cohort,
        rater=rater,
        area_mm2=metrics.area_mm2,
        d_min_mm=metrics.d_min_mm,
        d_max_mm=metrics.d_max_mm,
        eccentricity=metrics.eccentricity,
        density=metrics.vessel_density,
    )
