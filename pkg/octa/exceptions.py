"""Typed errors raised by the OCT-A pipeline."""

from typing import Any, Optional


class OctaError(Exception):
    """Base class for every error raised by this package."""

    def __str__(self) -> str:
        return self.__class__.__name__ + ": " + " ".join(str(a) for a in self.args)


class ArgumentError(OctaError, ValueError):
    """Invalid argument or violated precondition."""


class ConfigError(OctaError):
    """Problem with a run configuration or sidecar file."""


class SchemaError(OctaError):
    """A CSV or manifest line does not follow the expected schema."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


# Raster I/O


class RasterError(OctaError):
    """Problem reading or writing a raster file."""


class RasterNotFoundError(RasterError, FileNotFoundError):
    """Raster file does not exist."""


class RasterFormatError(RasterError):
    """Raster file header is malformed or uses an unsupported format."""


class RasterTruncatedError(RasterError):
    """Raster payload is shorter than the header promises."""


class RasterShapeError(RasterError):
    """Raster size does not match the ROI or image it is paired with."""


# Numerical degeneracy


class DegenerateInputError(OctaError):
    """Input carries no usable signal (constant image, zero variance, ...)."""


class DegenerateHistogramError(DegenerateInputError):
    """Histogram occupies a single bin; no threshold separates two classes."""


class DegenerateSampleError(DegenerateInputError):
    """Statistical sample has zero variance where the statistic needs some."""


# Training / models


class InsufficientClassPixelsError(OctaError):
    """Not enough pixels of a class to draw the requested balanced sample."""


class DivergenceError(OctaError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss diverged to {loss} in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class ModelFormatError(OctaError):
    """Model file magic, version or structure is invalid."""


class ModelShapeError(ModelFormatError):
    """Model layer shapes do not chain or do not match the expected patch side."""


class ModelChecksumError(ModelFormatError):
    """Model payload checksum does not match."""


class FovMismatchError(OctaError):
    """Model and image (or manifest entries) come from different fields of view."""


# Morphometry / metrics / cohorts


class EmptyFazError(OctaError):
    """Mask has no non-vessel pixel inside the ROI."""


class CentroidOutsideError(OctaError):
    """FAZ centroid lies outside the FAZ region (non-convex FAZ)."""

    def __init__(self, message: str, region: Any = None):
        super().__init__(message)
        self.region = region


class UndefinedRateError(OctaError):
    """A rate has a zero denominator."""

    def __init__(self, rate: str):
        super().__init__(f"{rate} is undefined (zero denominator)")
        self.rate = rate


class PairingError(OctaError):
    """Eyes are missing their counterpart (rater or prediction/manual pair)."""

    def __init__(self, message: str, eye_ids: Optional[list[str]] = None):
        super().__init__(message)
        self.eye_ids = eye_ids or []


class GenerationError(OctaError):
    """Synthetic generator could not meet its targets."""
