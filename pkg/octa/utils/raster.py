"""Raster containers, netpbm (PGM/PPM) codec, pixel scale and patch extraction.

Arrays are indexed ``(row, col)``. Points handed to users are ``(x=col, y=row)``.
"""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from octa.exceptions import (
    ArgumentError,
    RasterFormatError,
    RasterNotFoundError,
    RasterShapeError,
    RasterTruncatedError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SUPPORTED_MAXVALS = (255, 65535)


def _frozen_array(value, dtype) -> np.ndarray:
    arr = np.array(value, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


class GrayImage(BaseModel):
    """2-D scalar raster with intensities in [0, 1]."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray = Field(description="Row-major float64 intensities, shape (height, width)")
    scale_mm_per_px: Optional[float] = Field(
        default=None, gt=0, description="Physical pixel size in mm/px"
    )

    @field_validator("data", mode="before")
    @classmethod
    def _check_data(cls, value):
        arr = _frozen_array(value, np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        return arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "GrayImage":
        """Return a new image with the same scale and different pixels."""
        return GrayImage(data=data, scale_mm_per_px=self.scale_mm_per_px)


class RoiMask(BaseModel):
    """Measured area of an image (True = measured)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    included: np.ndarray = Field(description="Boolean array, True where the pixel is measured")

    @field_validator("included", mode="before")
    @classmethod
    def _check_included(cls, value):
        arr = _frozen_array(value, bool)
        if arr.ndim != 2:
            raise ValueError(f"ROI must be 2-D, got shape {arr.shape}")
        if not arr.any():
            raise ValueError("ROI must include at least one pixel")
        return arr

    @property
    def shape(self) -> tuple[int, int]:
        return self.included.shape

    @property
    def count(self) -> int:
        return int(self.included.sum())

    @classmethod
    def full(cls, height: int, width: int) -> "RoiMask":
        return cls(included=np.ones((height, width), dtype=bool))


class BinaryMask(BaseModel):
    """Vessel / non-vessel labels over an ROI.

    Pixels outside the ROI are stored as non-vessel and never counted.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    vessel: np.ndarray = Field(description="Boolean array, True for vessel pixels")
    roi: RoiMask

    @model_validator(mode="before")
    @classmethod
    def _mask_outside_roi(cls, values):
        if isinstance(values, dict) and "vessel" in values and "roi" in values:
            roi = values["roi"]
            vessel = np.array(values["vessel"], dtype=bool)
            included = roi.included if isinstance(roi, RoiMask) else np.asarray(roi["included"])
            if vessel.shape != included.shape:
                raise ValueError(
                    f"mask shape {vessel.shape} does not match ROI shape {included.shape}"
                )
            values = {**values, "vessel": _frozen_array(vessel & included, bool)}
        return values

    @property
    def shape(self) -> tuple[int, int]:
        return self.vessel.shape

    @property
    def vessel_count(self) -> int:
        return int(self.vessel.sum())

    @property
    def nonvessel(self) -> np.ndarray:
        """Non-vessel pixels inside the ROI."""
        return self.roi.included & ~self.vessel


class Region(BaseModel):
    """Non-empty 4-connected pixel set inside an image of known shape."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray = Field(description="Integer (row, col) coordinates, shape (n, 2)")
    image_shape: tuple[int, int]
    connectivity: int = 4

    @model_validator(mode="after")
    def _check_pixels(self):
        pix = self.pixels
        if pix.ndim != 2 or pix.shape[1] != 2 or pix.shape[0] == 0:
            raise ValueError("region must contain at least one (row, col) pixel")
        h, w = self.image_shape
        if pix[:, 0].min() < 0 or pix[:, 1].min() < 0 or pix[:, 0].max() >= h or pix[:, 1].max() >= w:
            raise ValueError("region pixels must lie inside the image")
        return self

    @field_validator("pixels", mode="before")
    @classmethod
    def _as_int(cls, value):
        return _frozen_array(value, np.int64).reshape(-1, 2)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "Region":
        return cls(pixels=np.argwhere(mask), image_shape=mask.shape)

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(min_row, min_col, max_row, max_col), inclusive."""
        lo = self.pixels.min(axis=0)
        hi = self.pixels.max(axis=0)
        return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])

    @property
    def mask(self) -> np.ndarray:
        out = np.zeros(self.image_shape, dtype=bool)
        out[self.pixels[:, 0], self.pixels[:, 1]] = True
        return out


def pixel_scale(fov_mm: float, samples: int) -> float:
    """Physical pixel size (mm/px) of a scan of ``samples`` A-scans across ``fov_mm``."""
    if not fov_mm > 0:
        raise ArgumentError(f"fov_mm must be positive, got {fov_mm}")
    if int(samples) != samples or samples < 1:
        raise ArgumentError(f"samples must be a positive integer, got {samples}")
    return fov_mm / samples


# Netpbm codec


def _read_netpbm(path: PathLike) -> tuple[bytes, int, int, int, bytes]:
    """Return (magic, width, height, maxval, payload) of a binary netpbm file."""
    path = Path(path)
    if not path.is_file():
        raise RasterNotFoundError(f"no such raster file: {path}")
    raw = path.read_bytes()
    magic = raw[:2]
    if magic != b"P5":
        raise RasterFormatError(f"unsupported format {magic!r} in {path} (expected P5)")

    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise RasterFormatError(f"malformed header in {path}: {token!r}")
        tokens.append(int(token))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise RasterFormatError(f"malformed header in {path}: missing separator before payload")
    pos += 1

    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise RasterFormatError(f"invalid dimensions {width}x{height} in {path}")
    if maxval not in SUPPORTED_MAXVALS:
        raise RasterFormatError(f"unsupported maxval {maxval} in {path}")
    return magic, width, height, maxval, raw[pos:]


def _read_levels(path: PathLike) -> tuple[np.ndarray, int]:
    """Integer pixel levels (height, width) and the file's maxval."""
    _, width, height, maxval, payload = _read_netpbm(path)
    dtype = np.dtype(np.uint8) if maxval == 255 else np.dtype(">u2")
    needed = width * height * dtype.itemsize
    if len(payload) < needed:
        raise RasterTruncatedError(
            f"payload of {path} has {len(payload)} bytes, expected {needed}"
        )
    levels = np.frombuffer(payload[:needed], dtype=dtype).reshape(height, width)
    return levels.astype(np.int64), maxval


def _write_pgm(path: PathLike, levels: np.ndarray, maxval: int) -> None:
    height, width = levels.shape
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + levels.astype(dtype).tobytes())


def load_gray(path: PathLike, scale_mm_per_px: Optional[float] = None) -> GrayImage:
    """Load a P5 graymap, mapping levels linearly onto [0, 1]."""
    levels, maxval = _read_levels(path)
    logger.debug(f"Loaded {path} ({levels.shape[1]}x{levels.shape[0]}, maxval {maxval})")
    return GrayImage(data=levels / maxval, scale_mm_per_px=scale_mm_per_px)


def save_gray(img: GrayImage, path: PathLike, bits: int = 8) -> None:
    """Save as P5, quantized to 8 or 16 bits."""
    if bits not in (8, 16):
        raise ArgumentError(f"bits must be 8 or 16, got {bits}")
    maxval = 255 if bits == 8 else 65535
    _write_pgm(path, np.rint(img.data * maxval).astype(np.int64), maxval)


def load_roi(path: PathLike) -> RoiMask:
    """ROI stored as PGM, levels above half of maxval are measured."""
    levels, maxval = _read_levels(path)
    return RoiMask(included=levels > maxval // 2)


def save_roi(roi: RoiMask, path: PathLike) -> None:
    _write_pgm(path, roi.included.astype(np.int64) * 255, 255)


def load_mask(path: PathLike, roi: Optional[RoiMask] = None) -> BinaryMask:
    """Vessel mask stored as PGM {0, 255}; levels above half of maxval are vessel."""
    levels, maxval = _read_levels(path)
    if roi is None:
        roi = RoiMask.full(*levels.shape)
    elif levels.shape != roi.shape:
        raise RasterShapeError(f"{path}: mask shape {levels.shape} does not match ROI shape {roi.shape}")
    return BinaryMask(vessel=levels > maxval // 2, roi=roi)


def save_mask(mask: BinaryMask, path: PathLike) -> None:
    _write_pgm(path, mask.vessel.astype(np.int64) * 255, 255)


def save_ppm(rgb: np.ndarray, path: PathLike) -> None:
    """Save an (height, width, 3) uint8 array as binary PPM (P6)."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ArgumentError(f"expected (height, width, 3) colour array, got {rgb.shape}")
    height, width, _ = rgb.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{width} {height}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes())


def icon_roi(width: int, height: int, icon_w: int, icon_h: int) -> RoiMask:
    """ROI excluding a vendor icon in the lower-left corner."""
    if not (0 <= icon_w < width and 0 <= icon_h < height):
        raise ArgumentError(f"icon {icon_w}x{icon_h} does not fit a {width}x{height} image")
    included = np.ones((height, width), dtype=bool)
    if icon_w and icon_h:
        included[height - icon_h :, :icon_w] = False
    return RoiMask(included=included)


# Patches


def mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Map possibly out-of-range indices into [0, n) by reflection about the border.

    The border sample is repeated (``-1 -> 0``, ``n -> n-1``).
    """
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m >= n, period - 1 - m, m)


def mirror_pad(data: np.ndarray, half: int) -> np.ndarray:
    """Pad a 2-D array by ``half`` samples on every side using mirror reflection."""
    h, w = data.shape
    rows = mirror_index(np.arange(-half, h + half), h)
    cols = mirror_index(np.arange(-half, w + half), w)
    return data[np.ix_(rows, cols)]


def extract_patch(img: GrayImage, center: tuple[int, int], k: int) -> np.ndarray:
    """k x k patch centred on ``center`` = (row, col), mirror-reflected at the borders."""
    if k < 3 or k % 2 == 0:
        raise ArgumentError(f"patch side must be odd and >= 3, got {k}")
    row, col = center
    if not (0 <= row < img.height and 0 <= col < img.width):
        raise ArgumentError(f"patch centre {center} lies outside a {img.width}x{img.height} image")
    half = k // 2
    rows = mirror_index(np.arange(row - half, row + half + 1), img.height)
    cols = mirror_index(np.arange(col - half, col + half + 1), img.width)
    return img.data[np.ix_(rows, cols)]
