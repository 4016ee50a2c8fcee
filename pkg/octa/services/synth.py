"""Synthetic en-face angiograms with exact ground truth."""

import logging
import math
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from octa.exceptions import ArgumentError, GenerationError
from octa.models import MetricsRow
from octa.services.stats import CohortDistribution, NormalSpec, draw_truncated
from octa.utils.raster import BinaryMask, GrayImage, RoiMask, icon_roi, pixel_scale

logger = logging.getLogger(__name__)

MAX_WALKS = 2000
MAX_FILL = 0.6


class FazEllipse(BaseModel):
    model_config = ConfigDict(frozen=True)

    cx: float
    cy: float
    a: float = Field(gt=0, description="Semi-axis along the rotated x direction, px")
    b: float = Field(gt=0, description="Semi-axis along the rotated y direction, px")
    rotation_deg: float = 0.0

    @property
    def semi_major(self) -> float:
        return max(self.a, self.b)

    @property
    def semi_minor(self) -> float:
        return min(self.a, self.b)

    def half_extents(self) -> tuple[float, float]:
        """Half width and half height of the bounding box."""
        t = math.radians(self.rotation_deg)
        hx = math.sqrt((self.a * math.cos(t)) ** 2 + (self.b * math.sin(t)) ** 2)
        hy = math.sqrt((self.a * math.sin(t)) ** 2 + (self.b * math.cos(t)) ** 2)
        return hx, hy

    def rasterize(self, height: int, width: int) -> np.ndarray:
        """Pixels whose centre lies inside the ellipse."""
        rows, cols = np.mgrid[0:height, 0:width]
        t = math.radians(self.rotation_deg)
        dx = cols - self.cx
        dy = rows - self.cy
        u = dx * math.cos(t) + dy * math.sin(t)
        v = -dx * math.sin(t) + dy * math.cos(t)
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


class SynthParams(BaseModel):
    """Geometry, vessel model and noise of one synthetic angiogram."""

    model_config = ConfigDict(frozen=True)

    width: int = Field(default=300, ge=16)
    height: int = Field(default=300, ge=16)
    scale_mm_per_px: float = Field(default=2.0 / 300, gt=0)
    faz: FazEllipse = Field(default_factory=lambda: FazEllipse(cx=150, cy=150, a=40, b=30))
    ring_width: int = Field(default=2, ge=2, description="Capillary ring enclosing the FAZ, px")

    target_fraction: float = Field(default=0.45, gt=0, lt=1)
    branch_prob: float = Field(default=0.04, ge=0, le=1)
    thickness_range: tuple[float, float] = Field(default=(1.5, 3.0), description="Vessel diameter range, px")
    tortuosity_deg: float = Field(default=12.0, ge=0, le=15, description="Max direction jitter per step")
    max_walk_steps: int = Field(default=250, ge=1)

    speckle_variance: float = Field(default=0.05, ge=0)
    background: float = Field(default=0.12, ge=0, le=1)
    brightness: float = Field(default=0.8, ge=0, le=1)
    icon_px: int = Field(default=0, ge=0, description="Side of a vendor icon in the lower-left corner")
    seed: int = 0

    @model_validator(mode="after")
    def _check_geometry(self):
        lo, hi = self.thickness_range
        if not 1.0 <= lo <= hi:
            raise ValueError("thickness range must satisfy 1 <= min <= max")
        hx, hy = self.faz.half_extents()
        margin = self.ring_width + 1
        if (
            self.faz.cx - hx - margin < 0
            or self.faz.cy - hy - margin < 0
            or self.faz.cx + hx + margin > self.width - 1
            or self.faz.cy + hy + margin > self.height - 1
        ):
            raise ValueError("FAZ ellipse and its ring must lie inside the image")
        if self.icon_px and (self.icon_px >= self.width or self.icon_px >= self.height):
            raise ValueError("icon does not fit the image")
        return self


class GroundTruth(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mask: BinaryMask
    faz: FazEllipse
    vessel_fraction: float = Field(description="Vessel pixels / ROI pixels of the truth mask")
    area_mm2: float
    d_max_mm: float
    d_min_mm: float
    eccentricity: float


class _Canvas:
    """Anti-aliased vessel coverage with an exact running count of truth pixels."""

    def __init__(self, height: int, width: int, allowed: np.ndarray):
        self.field = np.zeros((height, width))
        self.allowed = allowed
        self.count = 0

    def paint(self, mask: np.ndarray) -> None:
        self.count += int(np.count_nonzero(mask & (self.field < 0.5) & self.allowed))
        self.field[mask] = 1.0

    def stamp(self, x: float, y: float, radius: float) -> None:
        h, w = self.field.shape
        reach = int(math.ceil(radius + 1))
        r0, r1 = max(0, int(y) - reach), min(h, int(y) + reach + 2)
        c0, c1 = max(0, int(x) - reach), min(w, int(x) + reach + 2)
        if r0 >= r1 or c0 >= c1:
            return
        rows, cols = np.mgrid[r0:r1, c0:c1]
        coverage = np.clip(radius + 0.5 - np.hypot(cols - x, rows - y), 0.0, 1.0)
        window = self.field[r0:r1, c0:c1]
        newly = (coverage >= 0.5) & (window < 0.5) & self.allowed[r0:r1, c0:c1]
        self.count += int(np.count_nonzero(newly))
        np.maximum(window, coverage, out=window)


def generate(p: SynthParams) -> tuple[GrayImage, GroundTruth]:
    """
    Draw one angiogram and its exact ground truth.

    Vessels are biased random walks with branching, each started at the point
    farthest from the vessels drawn so far, so no intercapillary gap grows
    larger than needed. A capillary ring closes the FAZ. Drawing stops as soon
    as the truth vessel fraction reaches ``p.target_fraction``.

    Raises:
        GenerationError: the target fraction is not reached within the walk budget
    """
    rng = np.random.default_rng(p.seed)
    h, w = p.height, p.width
    roi = icon_roi(w, h, p.icon_px, p.icon_px) if p.icon_px else RoiMask.full(h, w)
    faz = p.faz.rasterize(h, w)
    distance_to_faz = ndimage.distance_transform_edt(~faz)
    ring = (distance_to_faz <= p.ring_width) & ~faz
    allowed = roi.included & ~faz
    target = int(math.ceil(p.target_fraction * roi.count))

    canvas = _Canvas(h, w, allowed)
    canvas.paint(ring)
    if canvas.count > target:
        raise GenerationError(
            f"FAZ ring alone covers {canvas.count / roi.count:.3f} > target {p.target_fraction}"
        )

    r_lo, r_hi = p.thickness_range[0] / 2, p.thickness_range[1] / 2
    free = allowed & (distance_to_faz > p.ring_width + r_hi)
    jitter = math.radians(p.tortuosity_deg)
    walks = 0
    while canvas.count < target:
        if walks >= MAX_WALKS:
            raise GenerationError(
                f"vessel fraction {canvas.count / roi.count:.3f} short of {p.target_fraction} "
                f"after {MAX_WALKS} walks"
            )
        gaps = ndimage.distance_transform_edt((canvas.field < 0.5) & free)
        far = np.argwhere(gaps >= 0.8 * gaps.max())
        y, x = far[rng.integers(len(far))].astype(float)
        stack = [(x, y, rng.uniform(0, 2 * math.pi), rng.uniform(r_lo, r_hi))]
        while stack and canvas.count < target:
            x, y, angle, radius = stack.pop()
            for _ in range(p.max_walk_steps):
                col, row = int(round(x)), int(round(y))
                if not (0 <= row < h and 0 <= col < w):
                    break
                if distance_to_faz[row, col] <= p.ring_width + radius:
                    break
                canvas.stamp(x, y, radius)
                if canvas.count >= target:
                    break
                if rng.random() < p.branch_prob:
                    turn = rng.choice([-1.0, 1.0]) * rng.uniform(math.radians(25), math.radians(60))
                    stack.append((x, y, angle + turn, max(r_lo, radius * 0.8)))
                angle += rng.uniform(-jitter, jitter)
                x += math.cos(angle)
                y += math.sin(angle)
        walks += 1

    truth = (canvas.field >= 0.5) & ~faz
    mask = BinaryMask(vessel=truth, roi=roi)
    fraction = mask.vessel_count / roi.count

    signal = p.brightness * canvas.field + p.background
    if p.speckle_variance > 0:
        shape = 1.0 / p.speckle_variance
        signal = signal * rng.gamma(shape, 1.0 / shape, size=signal.shape)
    data = np.clip(signal, 0.0, 1.0)
    if p.icon_px:
        data[h - p.icon_px :, : p.icon_px] = 1.0

    a, b = p.faz.semi_major, p.faz.semi_minor
    s = p.scale_mm_per_px
    logger.debug(f"Generated {w}x{h} angiogram: {walks} walks, vessel fraction {fraction:.4f}")
    return (
        GrayImage(data=data, scale_mm_per_px=s),
        GroundTruth(
            mask=mask,
            faz=p.faz,
            vessel_fraction=fraction,
            area_mm2=math.pi * p.faz.a * p.faz.b * s * s,
            d_max_mm=2 * a * s,
            d_min_mm=2 * b * s,
            eccentricity=math.sqrt(1 - (b / a) ** 2),
        ),
    )


# Cohorts


def _spec(mean: float, sd: float) -> NormalSpec:
    return NormalSpec(mean=mean, sd=sd)


def _cohort(area, d_min, d_max, ecc, density) -> CohortDistribution:
    return CohortDistribution(
        area_mm2=_spec(*area),
        d_min_mm=_spec(*d_min),
        d_max_mm=_spec(*d_max),
        eccentricity=_spec(*ecc),
        density=_spec(*density),
    )


class DevicePreset(BaseModel):
    """Scan protocol, eye counts and reported clinical outcomes of one OCT-A system."""

    scan_preset: str
    fov_mm: float
    samples: int
    eyes: dict[str, int]
    icon_px: int = 0
    outcomes: dict[str, dict[str, CohortDistribution]] = Field(
        description="rater -> cohort -> metric distributions"
    )

    @property
    def scale_mm_per_px(self) -> float:
        return pixel_scale(self.fov_mm, self.samples)


DEVICE_PRESETS: dict[str, DevicePreset] = {
    "zeiss": DevicePreset(
        scan_preset="zeiss3mm245",
        fov_mm=3.0,
        samples=245,
        eyes={"healthy": 13, "diabetic": 10},
        outcomes={
            "manual": {
                "healthy": _cohort((0.278, 0.130), (0.478, 0.116), (0.736, 0.214), (0.750, 0.052), (0.493, 0.026)),
                "diabetic": _cohort((0.552, 0.416), (0.539, 0.217), (1.035, 0.436), (0.837, 0.056), (0.378, 0.069)),
            },
            "automated": {
                "healthy": _cohort((0.332, 0.154), (0.500, 0.102), (0.748, 0.172), (0.730, 0.064), (0.513, 0.034)),
                "diabetic": _cohort((0.736, 0.480), (0.514, 0.166), (1.164, 0.354), (0.886, 0.047), (0.418, 0.058)),
            },
        },
    ),
    "optovue": DevicePreset(
        scan_preset="optovue3mm304",
        fov_mm=3.0,
        samples=304,
        eyes={"healthy": 16, "diabetic": 8},
        icon_px=24,
        outcomes={
            "manual": {
                "healthy": _cohort((0.280, 0.098), (0.514, 0.114), (0.704, 0.123), (0.677, 0.087), (0.519, 0.042)),
                "diabetic": _cohort((0.594, 0.347), (0.634, 0.226), (1.114, 0.363), (0.792, 0.097), (0.385, 0.053)),
            },
            "automated": {
                "healthy": _cohort((0.261, 0.080), (0.472, 0.096), (0.689, 0.123), (0.717, 0.089), (0.525, 0.014)),
                "diabetic": _cohort((0.492, 0.249), (0.537, 0.159), (0.950, 0.273), (0.810, 0.089), (0.418, 0.048)),
            },
        },
    ),
    "prototype": DevicePreset(
        scan_preset="prototype2mm300",
        fov_mm=2.0,
        samples=300,
        eyes={"healthy": 21, "diabetic": 7},
        outcomes={
            "manual": {
                "healthy": _cohort((0.300, 0.146), (0.485, 0.174), (0.707, 0.229), (0.721, 0.083), (0.381, 0.043)),
                "diabetic": _cohort((0.415, 0.164), (0.516, 0.161), (0.928, 0.164), (0.819, 0.083), (0.311, 0.047)),
            },
            "automated": {
                "healthy": _cohort((0.279, 0.113), (0.470, 0.130), (0.707, 0.159), (0.740, 0.092), (0.388, 0.015)),
                "diabetic": _cohort((0.366, 0.104), (0.446, 0.088), (0.895, 0.172), (0.852, 0.052), (0.281, 0.015)),
            },
        },
    ),
}

SCAN_TO_DEVICE = {preset.scan_preset: name for name, preset in DEVICE_PRESETS.items()}


def cohort_distribution(
    device: str, cohort: Literal["healthy", "diabetic"], rater: Literal["manual", "automated"] = "automated"
) -> CohortDistribution:
    if device not in DEVICE_PRESETS:
        raise ArgumentError(f"unknown device {device!r}; expected one of {sorted(DEVICE_PRESETS)}")
    return DEVICE_PRESETS[device].outcomes[rater][cohort]


class SynthEye(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    eye_id: str
    cohort: str
    params: SynthParams
    image: GrayImage
    truth: GroundTruth

    def truth_row(self) -> MetricsRow:
        """Analytic FAZ geometry and exact density, as the manual rater."""
        return MetricsRow(
            eye_id=self.eye_id,
            cohort=self.cohort,
            rater="manual",
            area_mm2=self.truth.area_mm2,
            d_min_mm=self.truth.d_min_mm,
            d_max_mm=self.truth.d_max_mm,
            eccentricity=self.truth.eccentricity,
            density=self.truth.vessel_fraction,
        )


class SynthCohort(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    eyes: list[SynthEye]

    @property
    def truth_rows(self) -> list[MetricsRow]:
        return [eye.truth_row() for eye in self.eyes]


def _eye_params(
    dist: CohortDistribution, template: SynthParams, rng: np.random.Generator
) -> SynthParams:
    s = template.scale_mm_per_px
    limit = 0.35 * min(template.width, template.height) - template.ring_width
    area = draw_truncated(dist.area_mm2, (1000 * s * s, math.pi * limit * limit * s * s), 1, rng)[0]
    ecc = draw_truncated(dist.eccentricity, (0.0, 0.97), 1, rng)[0]
    density = draw_truncated(dist.density, (0.15, 0.7), 1, rng)[0]
    ratio = math.sqrt(1 - ecc * ecc)
    a = math.sqrt(area / (math.pi * ratio * s * s))
    if a > limit:
        a = limit
    b = a * ratio
    density = min(density, MAX_FILL * (1 - math.pi * a * b / (template.width * template.height)))
    faz = FazEllipse(
        cx=(template.width - 1) / 2 + rng.uniform(-4, 4),
        cy=(template.height - 1) / 2 + rng.uniform(-4, 4),
        a=a,
        b=b,
        rotation_deg=rng.uniform(-30, 30),
    )
    return template.model_copy(
        update={"faz": faz, "target_fraction": float(density), "seed": int(rng.integers(2**32))}
    )


def generate_cohort(
    healthy: CohortDistribution,
    diabetic: CohortDistribution,
    n_each: int,
    seed: int = 0,
    template: Optional[SynthParams] = None,
) -> SynthCohort:
    """
    Draw ``n_each`` healthy and ``n_each`` diabetic eyes.

    FAZ area, eccentricity and vessel fraction come from truncated normals
    around each cohort's means; axes follow from area and eccentricity
    (b/a = sqrt(1 - e^2)).

    Args:
        healthy, diabetic: Metric distributions per cohort
        n_each: Eyes per cohort, >= 2
        seed: RNG seed
        template: Image size, scale, vessel model and noise shared by every eye

    Returns:
        SynthCohort in eye-id order
    """
    if n_each < 2:
        raise ArgumentError(f"n_each must be >= 2, got {n_each}")
    template = template or SynthParams()
    rng = np.random.default_rng(seed)
    eyes = []
    for cohort, dist in (("healthy", healthy), ("diabetic", diabetic)):
        for i in range(1, n_each + 1):
            params = _eye_params(dist, template, rng)
            image, truth = generate(params)
            eye_id = f"{cohort}-{i:03d}"
            eyes.append(SynthEye(eye_id=eye_id, cohort=cohort, params=params, image=image, truth=truth))
            logger.info(
                f"{eye_id}: FAZ {truth.area_mm2:.3f} mm2, e {truth.eccentricity:.3f}, "
                f"density {truth.vessel_fraction:.3f}"
            )
    return SynthCohort(eyes=eyes)


def device_template(device: str, **overrides) -> SynthParams:
    """SynthParams sized and scaled for a device preset."""
    if device not in DEVICE_PRESETS:
        raise ArgumentError(f"unknown device {device!r}; expected one of {sorted(DEVICE_PRESETS)}")
    preset = DEVICE_PRESETS[device]
    centre = (preset.samples - 1) / 2
    values = {
        "width": preset.samples,
        "height": preset.samples,
        "scale_mm_per_px": preset.scale_mm_per_px,
        "icon_px": preset.icon_px,
        "faz": FazEllipse(cx=centre, cy=centre, a=30, b=25),
        **overrides,
    }
    return SynthParams(**values)


__all__ = [
    "DEVICE_PRESETS",
    "DevicePreset",
    "FazEllipse",
    "GroundTruth",
    "SynthCohort",
    "SynthEye",
    "SynthParams",
    "cohort_distribution",
    "device_template",
    "generate",
    "generate_cohort",
]
