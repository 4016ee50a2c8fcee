"""Configuration management: process settings from the environment and per-run config files."""

from pathlib import Path
from typing import Literal, Optional, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from octa.exceptions import ConfigError
from octa.services.preprocess import ClaheParams, NotchParams, PreprocessParams
from octa.services.segnet import ARCHITECTURE_PATCH_SIDES, TrainConfig
from octa.utils.raster import pixel_scale


class Settings(BaseSettings):
    """Process-wide settings loaded from environment variables (prefix ``OCTA_``)."""

    model_config = SettingsConfigDict(
        env_prefix="OCTA_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    log_level: str = Field(default="INFO", description="Logging level")

    # API Configuration
    api_host: str = Field(default="127.0.0.1", description="API bind address")
    api_port: int = Field(default=8000, description="API server port")

    output_dir: str = Field(default="./octa-out", description="Default output directory for jobs")
    inference_batch: int = Field(
        default=512, ge=1, description="Patches per forward pass during inference"
    )


# Global settings instance
settings = Settings()


# Scan protocols: preset -> (field of view in mm, A-scans per B-scan)
SCAN_PRESETS: dict[str, tuple[float, int]] = {
    "prototype2mm300": (2.0, 300),
    "optovue3mm304": (3.0, 304),
    "zeiss3mm245": (3.0, 245),
}

PresetName = Literal["prototype2mm300", "optovue3mm304", "zeiss3mm245", "custom"]


class RunConfig(BaseModel):
    """Per-run configuration read from a plain-text ``key=value`` file."""

    model_config = ConfigDict(extra="forbid")

    preset: PresetName = Field(default="prototype2mm300", description="Device scan preset")
    fov_mm: Optional[float] = Field(default=None, gt=0, description="Field of view (custom preset)")
    samples: Optional[int] = Field(default=None, ge=1, description="A-scans across the field of view")

    # Preprocessing
    preprocess: bool = Field(default=True, description="Apply notch filter and CLAHE before the network")
    notch_band_halfwidth: int = Field(default=1, ge=0)
    notch_min_stripe_freq: int = Field(default=4, ge=1)
    notch_attenuation: float = Field(default=0.0, ge=0.0, le=1.0)
    clahe_tiles_x: int = Field(default=8, ge=1)
    clahe_tiles_y: int = Field(default=8, ge=1)
    clahe_clip_limit: float = Field(default=2.0, gt=1.0)

    # Training
    architecture: Literal["default", "small"] = Field(default="default")
    patch_side: Optional[int] = Field(default=None, ge=3, description="Defaults to the architecture's")
    learning_rate: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(default=64, ge=1)
    epochs: int = Field(default=10, ge=1)
    patches_per_class: int = Field(default=10000, ge=1, description="Per class per fold")

    # Quantification
    gamma: float = Field(default=0.5, gt=0, description="Gamma for the density path")
    diameter_step_deg: float = Field(default=1.0, gt=0, le=5.0)

    out_dir: str = Field(default_factory=lambda: settings.output_dir, description="Output directory")
    seed: int = Field(default=0, description="RNG seed for sampling, init and shuffling")

    @model_validator(mode="after")
    def _check_geometry(self):
        if self.preset == "custom":
            if self.fov_mm is None or self.samples is None:
                raise ValueError("preset 'custom' requires fov_mm and samples")
        else:
            fov, samples = SCAN_PRESETS[self.preset]
            if self.fov_mm is not None and self.fov_mm != fov:
                raise ValueError(f"preset {self.preset} fixes fov_mm={fov}")
            if self.samples is not None and self.samples != samples:
                raise ValueError(f"preset {self.preset} fixes samples={samples}")
        if self.patch_side is not None and self.patch_side % 2 == 0:
            raise ValueError("patch_side must be odd")
        return self

    @classmethod
    def from_file(
        cls, path: Optional[Union[str, Path]] = None, **overrides
    ) -> "RunConfig":
        """
        Load a run config, applying non-None overrides (CLI flags) on top of the file.

        Args:
            path: Config file with ``key=value`` lines, or None for defaults
            **overrides: Values that replace the file's

        Returns:
            Validated RunConfig

        Raises:
            ConfigError: missing file, unknown keys or invalid values
        """
        values: dict = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            values = {k: v for k, v in dotenv_values(path).items() if v is not None}
            unknown = sorted(set(values) - set(cls.model_fields))
            if unknown:
                raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigError(f"invalid run config: {e}") from e

    @property
    def geometry(self) -> tuple[float, int]:
        if self.preset == "custom":
            return self.fov_mm, self.samples
        return SCAN_PRESETS[self.preset]

    @property
    def scale_mm_per_px(self) -> float:
        return pixel_scale(*self.geometry)

    @property
    def resolved_patch_side(self) -> int:
        return self.patch_side or ARCHITECTURE_PATCH_SIDES[self.architecture]

    def preprocess_params(self) -> PreprocessParams:
        return PreprocessParams(
            enabled=self.preprocess,
            notch=NotchParams(
                band_halfwidth=self.notch_band_halfwidth,
                min_stripe_freq=self.notch_min_stripe_freq,
                attenuation=self.notch_attenuation,
            ),
            clahe=ClaheParams(
                tiles_x=self.clahe_tiles_x,
                tiles_y=self.clahe_tiles_y,
                clip_limit=self.clahe_clip_limit,
            ),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            patches_per_class=self.patches_per_class,
            architecture=self.architecture,
            patch_side=self.resolved_patch_side,
        )
