"""En-face conditioning: subpixel registration, stripe notch filter and CLAHE."""

import logging
from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

from octa.exceptions import ArgumentError, DegenerateInputError
from octa.utils.raster import GrayImage

logger = logging.getLogger(__name__)

HIST_BINS = 256


class Shift2D(BaseModel):
    """Translation in pixels; positive values move content down/right."""

    model_config = ConfigDict(frozen=True)

    dy: float
    dx: float

    @field_validator("dy", "dx")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not np.isfinite(value):
            raise ValueError("shift components must be finite")
        return value

    def __neg__(self) -> "Shift2D":
        return Shift2D(dy=-self.dy, dx=-self.dx)


class NotchParams(BaseModel):
    """Frequency band suppressed by the stripe notch filter."""

    model_config = ConfigDict(frozen=True)

    band_halfwidth: int = Field(default=1, ge=0, description="Half-width in horizontal-frequency bins")
    min_stripe_freq: int = Field(default=4, ge=1, description="Lowest vertical-frequency bin touched")
    attenuation: float = Field(default=0.0, ge=0.0, le=1.0, description="Gain applied inside the band")


class ClaheParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    tiles_x: int = Field(default=8, ge=1)
    tiles_y: int = Field(default=8, ge=1)
    clip_limit: float = Field(default=2.0, gt=1.0, description="Multiple of the mean bin count")


class PreprocessParams(BaseModel):
    """Preprocessing chain applied identically at train and inference time."""

    model_config = ConfigDict(frozen=True)

    enabled: bool = True
    notch: NotchParams = Field(default_factory=NotchParams)
    clahe: ClaheParams = Field(default_factory=ClaheParams)


# Registration


def _upsampled_dft(
    data: np.ndarray, region_size: int, upsample: int, offsets: np.ndarray
) -> np.ndarray:
    """Inverse DFT of ``data`` sampled on a ``region_size``-square grid at 1/upsample pitch.

    Matrix-multiply DFT restricted to a neighbourhood of the coarse peak, which
    costs far less than zero-padding the whole spectrum by ``upsample``.
    """
    h, w = data.shape
    # each pass contracts the trailing axis, so the result comes out as (rows, cols)
    for n, offset in ((w, offsets[1]), (h, offsets[0])):
        kernel = (np.arange(region_size) - offset)[:, None] * np.fft.fftfreq(n, upsample)
        kernel = np.exp(-2j * np.pi * kernel)
        data = np.tensordot(kernel, data, axes=(1, -1))
    return data


def register_translation(reference: GrayImage, moving: GrayImage, upsample: int = 1) -> Shift2D:
    """
    Estimate the translation that maps ``reference`` onto ``moving``.

    The coarse peak of the circular cross-correlation (computed through the
    cross-power spectrum) is refined with a locally upsampled DFT around it.

    Args:
        reference: Fixed frame
        moving: Frame displaced relative to the reference
        upsample: Subpixel resolution factor, 1..100

    Returns:
        Shift2D such that ``moving`` is ``reference`` displaced by it

    Raises:
        ArgumentError: size mismatch or upsample out of range
        DegenerateInputError: either frame is constant
    """
    if reference.shape != moving.shape:
        raise ArgumentError(f"frame sizes differ: {reference.shape} vs {moving.shape}")
    if not 1 <= upsample <= 100:
        raise ArgumentError(f"upsample must be in 1..100, got {upsample}")
    ref = reference.data - reference.data.mean()
    mov = moving.data - moving.data.mean()
    if not np.any(ref) or not np.any(mov):
        raise DegenerateInputError("cannot register a constant frame")

    product = np.fft.fft2(mov) * np.fft.fft2(ref).conj()
    correlation = np.fft.ifft2(product)
    shape = np.array(correlation.shape)
    peak = np.array(np.unravel_index(np.argmax(np.abs(correlation)), correlation.shape), dtype=float)
    midpoints = np.fix(shape / 2)
    peak[peak > midpoints] -= shape[peak > midpoints]

    if upsample > 1:
        peak = np.round(peak * upsample) / upsample
        region = int(np.ceil(upsample * 1.5))
        centre = np.fix(region / 2.0)
        offsets = centre - peak * upsample
        fine = _upsampled_dft(product.conj(), region, upsample, offsets).conj()
        fine_peak = np.array(np.unravel_index(np.argmax(np.abs(fine)), fine.shape), dtype=float)
        peak = peak + (fine_peak - centre) / upsample

    logger.debug(f"Registered frame: dy={peak[0]:.3f} dx={peak[1]:.3f}")
    return Shift2D(dy=float(peak[0]), dx=float(peak[1]))


def apply_shift(img: GrayImage, shift: Shift2D) -> GrayImage:
    """Translate by ``shift`` with bilinear resampling; samples beyond the border repeat it."""
    if shift.dy == 0 and shift.dx == 0:
        return img
    moved = ndimage.shift(img.data, (shift.dy, shift.dx), order=1, mode="nearest")
    return img.with_data(np.clip(moved, 0.0, 1.0))


def register_frames(frames: Sequence[GrayImage], upsample: int = 10) -> GrayImage:
    """Align repeat frames to the first one and average them."""
    if not frames:
        raise ArgumentError("at least one frame is required")
    reference = frames[0]
    aligned = [reference.data]
    for i, frame in enumerate(frames[1:], start=1):
        shift = register_translation(reference, frame, upsample)
        logger.info(f"Frame {i}: shift ({shift.dy:.2f}, {shift.dx:.2f}) px")
        aligned.append(apply_shift(frame, -shift).data)
    return reference.with_data(np.mean(aligned, axis=0))


# Notch filter


def _stripe_band(shape: tuple[int, int], p: NotchParams) -> np.ndarray:
    h, w = shape
    v = np.abs(np.rint(np.fft.fftfreq(h) * h))
    u = np.abs(np.rint(np.fft.fftfreq(w) * w))
    return (u[None, :] <= p.band_halfwidth) & (v[:, None] >= p.min_stripe_freq)


def notch_response(data: np.ndarray, p: NotchParams) -> np.ndarray:
    """Unclamped notch-filtered array (linear in ``data``)."""
    spectrum = np.fft.fft2(data)
    spectrum[_stripe_band(data.shape, p)] *= p.attenuation
    return np.fft.ifft2(spectrum).real


def notch_filter(img: GrayImage, p: NotchParams) -> GrayImage:
    """Attenuate horizontal stripe artefacts (fast-scan motion lines)."""
    return img.with_data(np.clip(notch_response(img.data, p), 0.0, 1.0))


# CLAHE


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * n) // tiles


def _tile_lut(levels: np.ndarray, clip_limit: float) -> np.ndarray:
    hist = np.bincount(levels.ravel(), minlength=HIST_BINS).astype(np.float64)
    if np.count_nonzero(hist) == 1:
        # single level: keep it
        return np.arange(HIST_BINS) / (HIST_BINS - 1)
    limit = clip_limit * levels.size / HIST_BINS
    excess = np.maximum(hist - limit, 0.0).sum()
    hist = np.minimum(hist, limit) + excess / HIST_BINS
    cdf = np.cumsum(hist)
    return cdf / cdf[-1]


def _interp_axis(n: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower/upper tile index and weight of the upper tile for each coordinate."""
    centres = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n)
    upper = np.searchsorted(centres, pos, side="right")
    lower = np.clip(upper - 1, 0, len(centres) - 1)
    upper = np.clip(upper, 0, len(centres) - 1)
    span = centres[upper] - centres[lower]
    frac = np.where(span > 0, (pos - centres[lower]) / np.where(span > 0, span, 1.0), 0.0)
    return lower, upper, frac


def clahe(img: GrayImage, p: ClaheParams) -> GrayImage:
    """
    Contrast-limited adaptive histogram equalization over a tiles_y x tiles_x grid.

    Args:
        img: Image to equalize
        p: Tile grid and clip limit

    Returns:
        Equalized image of the same size

    Raises:
        ArgumentError: image smaller than the tile grid
    """
    h, w = img.shape
    if h < p.tiles_y or w < p.tiles_x:
        raise ArgumentError(f"image {w}x{h} is smaller than the {p.tiles_x}x{p.tiles_y} tile grid")
    levels = np.rint(img.data * (HIST_BINS - 1)).astype(np.int64)
    row_edges = _tile_edges(h, p.tiles_y)
    col_edges = _tile_edges(w, p.tiles_x)

    luts = np.empty((p.tiles_y, p.tiles_x, HIST_BINS))
    for ty in range(p.tiles_y):
        for tx in range(p.tiles_x):
            tile = levels[row_edges[ty] : row_edges[ty + 1], col_edges[tx] : col_edges[tx + 1]]
            luts[ty, tx] = _tile_lut(tile, p.clip_limit)

    y0, y1, fy = _interp_axis(h, row_edges)
    x0, x1, fx = _interp_axis(w, col_edges)
    fy = fy[:, None]
    fx = fx[None, :]
    top = (1 - fx) * luts[y0[:, None], x0[None, :], levels] + fx * luts[y0[:, None], x1[None, :], levels]
    bottom = (1 - fx) * luts[y1[:, None], x0[None, :], levels] + fx * luts[y1[:, None], x1[None, :], levels]
    out = (1 - fy) * top + fy * bottom
    return img.with_data(np.clip(out, 0.0, 1.0))


def preprocess(img: GrayImage, params: PreprocessParams) -> GrayImage:
    """Notch filter followed by CLAHE, or the image itself when disabled."""
    if not params.enabled:
        return img
    return clahe(notch_filter(img, params.notch), params.clahe)
