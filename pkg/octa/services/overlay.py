"""Annotated colour overlays of the FAZ measurements."""

import numpy as np
from skimage import draw

from octa.services.morphometry import FazMetrics
from octa.utils.raster import GrayImage, RoiMask, save_ppm

YELLOW = (255, 255, 0)
GREEN = (0, 255, 0)
RED = (255, 0, 0)
WHITE = (255, 255, 255)


def _chord(rgb: np.ndarray, chord, colour) -> None:
    (x0, y0), (x1, y1) = chord
    h, w, _ = rgb.shape
    rr, cc = draw.line(int(round(y0)), int(round(x0)), int(round(y1)), int(round(x1)))
    keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    rgb[rr[keep], cc[keep]] = colour


def render_overlay(base: GrayImage, metrics: FazMetrics, roi: RoiMask) -> np.ndarray:
    """
    Grey base with the FAZ perimeter in yellow, the maximum-diameter chord in
    green and the minimum-diameter chord in red. Pixels outside the ROI
    (vendor icon) are white; all other pixels keep their grey level.

    Returns:
        (height, width, 3) uint8 array
    """
    grey = np.rint(np.clip(base.data, 0.0, 1.0) * 255).astype(np.uint8)
    rgb = np.repeat(grey[:, :, None], 3, axis=2)
    rgb[~roi.included] = WHITE
    if metrics.perimeter:
        xs, ys = np.array(metrics.perimeter).T
        rgb[ys, xs] = YELLOW
    _chord(rgb, metrics.diameters_px.max_chord, GREEN)
    _chord(rgb, metrics.diameters_px.min_chord, RED)
    return rgb


def write_overlay(base: GrayImage, metrics: FazMetrics, roi: RoiMask, path) -> None:
    save_ppm(render_overlay(base, metrics, roi), path)
