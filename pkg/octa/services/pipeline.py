"""End-to-end orchestration shared by the CLI and the background jobs."""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from octa.config import RunConfig, settings
from octa.exceptions import ConfigError, FovMismatchError, OctaError, PairingError, RasterShapeError
from octa.models import MetricsRow
from octa.services.binarize import density_mask, otsu, threshold_map
from octa.services.metrics import AgreementRow, agreement_frame, confusion, dice, rates
from octa.services.morphometry import metrics_row, quantify
from octa.services.overlay import write_overlay
from octa.services.segnet import (
    ConfidenceMap,
    Sample,
    load_model,
    save_model,
    segment_image,
    split_half_cv,
)
from octa.services.stats import cohort_summary, render_table
from octa.services.synth import (
    DEVICE_PRESETS,
    SCAN_TO_DEVICE,
    cohort_distribution,
    device_template,
    generate_cohort,
)
from octa.utils.manifest import (
    ManifestEntry,
    Sidecar,
    check_field_of_view,
    read_manifest,
    read_metrics_csv,
    read_sidecar,
    write_manifest,
    write_metrics_csv,
    write_sidecar,
)
from octa.utils.raster import (
    GrayImage,
    RoiMask,
    load_gray,
    load_mask,
    load_roi,
    save_gray,
    save_mask,
    save_roi,
)
from octa.utils.telemetry import EYE_FAILURES, EYES_PROCESSED

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class EyeFailure(BaseModel):
    eye_id: str
    stage: str
    error: str


class RunOutcome(BaseModel):
    """Files written by a command and the eyes it had to exclude."""

    outputs: list[str] = Field(default_factory=list)
    failures: list[EyeFailure] = Field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failures)


class LoadedEye(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    entry: ManifestEntry
    image: GrayImage
    roi: RoiMask
    group: str


class PipelineService:
    """Runs the pipeline stages for one run configuration and output directory."""

    def __init__(self, config: Optional[RunConfig] = None, out_dir: Optional[PathLike] = None):
        self.config = config or RunConfig()
        self.out_dir = Path(out_dir or self.config.out_dir)
        self.inference_batch = settings.inference_batch

    # Inputs

    def load_eyes(self, manifest: PathLike) -> list[LoadedEye]:
        """
        Read a manifest and load every image at the configured pixel scale.

        Raises:
            FovMismatchError: sidecars or image widths disagree with each other or the preset
        """
        entries = read_manifest(manifest)
        if not entries:
            raise ConfigError(f"manifest {manifest} lists no eyes")
        fov_mm, _ = self.config.geometry
        check_field_of_view(entries, fov_mm)
        scale = self.config.scale_mm_per_px
        eyes = []
        for entry in entries:
            image = load_gray(entry.image_path, scale)
            roi = load_roi(entry.roi_path) if entry.roi_path else RoiMask.full(*image.shape)
            meta = read_sidecar(entry.image_path)
            group = f"{meta.device}/{entry.cohort}" if meta and meta.device else entry.cohort
            eyes.append(LoadedEye(entry=entry, image=image, roi=roi, group=group))
        widths = sorted({e.image.width for e in eyes})
        if len(widths) > 1:
            raise FovMismatchError(
                f"manifest mixes image widths {widths}; a training set is needed for each field of view"
            )
        return eyes

    def _manual_mask(self, eye: LoadedEye):
        return load_mask(eye.entry.mask_path, eye.roi)

    def _record(self, outcome: RunOutcome, eye_id: str, stage: str, error: Exception) -> None:
        logger.warning(f"{eye_id}: excluded from {stage}: {error}")
        EYE_FAILURES.labels(stage=stage).inc()
        outcome.failures.append(EyeFailure(eye_id=eye_id, stage=stage, error=str(error)))

    def _write_exceptions(self, outcome: RunOutcome) -> None:
        path = self.out_dir / "exceptions.log"
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{f.eye_id}\t{f.stage}\t{f.error}" for f in outcome.failures]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        outcome.outputs.append(str(path))

    def _save_map(self, eye_id: str, cmap: ConfidenceMap) -> Path:
        path = self.out_dir / "confidence" / f"{eye_id}.pgm"
        save_gray(cmap.as_image(), path, bits=16)
        return path

    # Stages

    def train(self, manifest: PathLike) -> RunOutcome:
        """
        Split-half cross-validated training.

        Writes ``models/fold_a.octanet``, ``models/fold_b.octanet``,
        ``train_loss.csv``, ``folds.csv`` and one 16-bit confidence map per eye.
        """
        eyes = self.load_eyes(manifest)
        if len(eyes) < 2:
            raise ConfigError(f"training needs >= 2 eyes, manifest lists {len(eyes)}")
        dataset = [
            Sample(image_id=e.entry.eye_id, image=e.image, truth=self._manual_mask(e)) for e in eyes
        ]
        logger.info(f"Training on {len(dataset)} eyes with the {self.config.architecture} architecture")
        result = split_half_cv(
            dataset,
            self.config.train_config(),
            preprocessing=self.config.preprocess_params(),
            batch_size=self.inference_batch,
        )

        outcome = RunOutcome()
        for name, model in zip(("fold_a", "fold_b"), result.models):
            path = self.out_dir / "models" / f"{name}.octanet"
            save_model(model, path)
            outcome.outputs.append(str(path))

        losses = pd.DataFrame(
            [
                {"fold": fold, "epoch": epoch, "loss": loss}
                for fold, trace in zip("AB", result.loss_traces)
                for epoch, loss in enumerate(trace, start=1)
            ]
        )
        loss_path = self.out_dir / "train_loss.csv"
        losses.to_csv(loss_path, index=False, float_format="%.10f", lineterminator="\n")
        folds = pd.DataFrame(
            [
                {"eye_id": eye_id, "trained_in": "AB"[i], "segmented_by": "AB"[result.inferred_by[eye_id]]}
                for i, ids in enumerate(result.folds)
                for eye_id in ids
            ]
        )
        folds_path = self.out_dir / "folds.csv"
        folds.to_csv(folds_path, index=False, lineterminator="\n")
        outcome.outputs += [str(loss_path), str(folds_path)]

        for eye_id, cmap in result.maps.items():
            outcome.outputs.append(str(self._save_map(eye_id, cmap)))
            EYES_PROCESSED.labels(stage="train").inc()
        return outcome

    def segment(self, model_path: PathLike, manifest: PathLike) -> RunOutcome:
        """Confidence maps for every manifest image from a saved model."""
        model = load_model(model_path, expected_patch_side=None)
        eyes = self.load_eyes(manifest)
        outcome = RunOutcome()
        for eye in eyes:
            eye_id = eye.entry.eye_id
            try:
                cmap = segment_image(model, eye.image, eye.roi, self.inference_batch)
            except FovMismatchError:
                raise
            except (OctaError, ValidationError) as e:
                self._record(outcome, eye_id, "segment", e)
                continue
            outcome.outputs.append(str(self._save_map(eye_id, cmap)))
            EYES_PROCESSED.labels(stage="segment").inc()
        self._write_exceptions(outcome)
        return outcome

    def quantify_eye(self, eye: LoadedEye, cmap: ConfidenceMap) -> tuple[MetricsRow, MetricsRow]:
        """Manual and automated metric rows of one eye; writes its mask and overlay."""
        cfg = self.config
        scale = cfg.scale_mm_per_px
        eye_id, cohort = eye.entry.eye_id, eye.entry.cohort

        manual = quantify(self._manual_mask(eye), scale, cfg.diameter_step_deg)
        vessels = threshold_map(cmap, otsu(cmap).threshold)
        automated = quantify(vessels, scale, cfg.diameter_step_deg, density_source=density_mask(cmap, cfg.gamma))

        save_mask(vessels, self.out_dir / "predicted" / f"{eye_id}.pgm")
        write_overlay(eye.image, automated, eye.roi, self.out_dir / "overlays" / f"{eye_id}.ppm")
        return (
            metrics_row(eye_id, cohort, "manual", manual),
            metrics_row(eye_id, cohort, "automated", automated),
        )

    def quantify(self, manifest: PathLike, maps_dir: PathLike) -> RunOutcome:
        """
        Metrics for the manual mask and the confidence map of every eye.

        An eye whose FAZ cannot be measured under either rater is left out of
        ``metrics.csv`` and listed in ``exceptions.log``.
        """
        eyes = self.load_eyes(manifest)
        maps_dir = Path(maps_dir)
        outcome = RunOutcome()
        rows: list[MetricsRow] = []
        for eye in eyes:
            eye_id = eye.entry.eye_id
            try:
                values = load_gray(maps_dir / f"{eye_id}.pgm").data
                if values.shape != eye.roi.shape:
                    raise RasterShapeError(f"map shape {values.shape} does not match ROI shape {eye.roi.shape}")
                cmap = ConfidenceMap(values=values, roi=eye.roi, scale_mm_per_px=eye.image.scale_mm_per_px)
                rows.extend(self.quantify_eye(eye, cmap))
            except (OctaError, ValidationError) as e:
                self._record(outcome, eye_id, "quantify", e)
                continue
            logger.info(f"{eye_id}: quantified")
            EYES_PROCESSED.labels(stage="quantify").inc()
            outcome.outputs.append(str(self.out_dir / "overlays" / f"{eye_id}.ppm"))

        path = self.out_dir / "metrics.csv"
        write_metrics_csv(rows, path)
        outcome.outputs.insert(0, str(path))
        self._write_exceptions(outcome)
        return outcome

    def evaluate(self, manifest: PathLike, pred_dir: PathLike) -> RunOutcome:
        """
        Pixel agreement between predicted masks (``<eye_id>.pgm``) and manual masks.

        Raises:
            PairingError: prediction files and manifest eyes do not pair up
        """
        eyes = self.load_eyes(manifest)
        pred_dir = Path(pred_dir)
        predicted = {p.stem for p in pred_dir.glob("*.pgm")}
        listed = {e.entry.eye_id for e in eyes}
        unpaired = sorted(predicted ^ listed)
        if unpaired:
            raise PairingError(f"unpaired eyes: {', '.join(unpaired)}", unpaired)

        outcome = RunOutcome()
        rows = []
        for eye in sorted(eyes, key=lambda e: e.entry.eye_id):
            eye_id = eye.entry.eye_id
            try:
                gt = self._manual_mask(eye)
                pred = load_mask(pred_dir / f"{eye_id}.pgm", eye.roi)
                counts = confusion(pred, gt)
                rates(counts)
                dice(counts)
                rows.append(AgreementRow(eye_id=eye_id, group=eye.group, counts=counts))
            except (OctaError, ValidationError) as e:
                self._record(outcome, eye_id, "evaluate", e)
                continue
            EYES_PROCESSED.labels(stage="evaluate").inc()

        per_image, summary = agreement_frame(rows)
        per_image_path = self.out_dir / "agreement.csv"
        summary_path = self.out_dir / "agreement_summary.csv"
        per_image_path.parent.mkdir(parents=True, exist_ok=True)
        per_image.to_csv(per_image_path, index=False, float_format="%.6f", lineterminator="\n")
        summary.to_csv(summary_path, index=False, float_format="%.6f", lineterminator="\n")
        outcome.outputs += [str(per_image_path), str(summary_path)]
        self._write_exceptions(outcome)
        return outcome

    def stats(self, metrics_csv: PathLike) -> RunOutcome:
        """Cohort report as ``report.json`` and ``report.txt``."""
        report = cohort_summary(read_metrics_csv(metrics_csv))
        self.out_dir.mkdir(parents=True, exist_ok=True)
        json_path = self.out_dir / "report.json"
        text_path = self.out_dir / "report.txt"
        json_path.write_text(report.to_json(), encoding="utf-8")
        text_path.write_text(render_table(report), encoding="utf-8")
        return RunOutcome(outputs=[str(json_path), str(text_path)])

    def report(self, metrics_csv: PathLike, agreement_csv: Optional[PathLike] = None) -> RunOutcome:
        """Human-readable report combining the cohort table and segmentation agreement."""
        text = render_table(cohort_summary(read_metrics_csv(metrics_csv)))
        if agreement_csv is not None:
            path = Path(agreement_csv)
            if not path.is_file():
                raise ConfigError(f"agreement CSV not found: {path}")
            per_image = pd.read_csv(path, dtype={"eye_id": str, "group": str})
            summary = (
                per_image.groupby("group", sort=True)[["accuracy", "sensitivity", "specificity"]]
                .agg(["mean", "std"])
                .round(3)
            )
            summary.columns = [f"{metric} {stat}" for metric, stat in summary.columns]
            text += "\nSegmentation agreement (mean, SD per group)\n" + summary.to_string() + "\n"
        self.out_dir.mkdir(parents=True, exist_ok=True)
        out = self.out_dir / "report.txt"
        out.write_text(text, encoding="utf-8")
        return RunOutcome(outputs=[str(out)])

    def synth(self, n_each: int, seed: Optional[int] = None) -> RunOutcome:
        """
        Synthetic healthy and diabetic cohorts for the configured device preset.

        Writes ``images/``, ``masks/``, ``rois/`` (vendor icon devices only),
        ``.meta`` sidecars, ``manifest.csv`` and ``truth.csv``.
        """
        preset = self.config.preset
        if preset not in SCAN_TO_DEVICE:
            raise ConfigError(f"no synthetic cohort preset for {preset!r}")
        device = SCAN_TO_DEVICE[preset]
        seed = self.config.seed if seed is None else seed
        cohort = generate_cohort(
            cohort_distribution(device, "healthy"),
            cohort_distribution(device, "diabetic"),
            n_each,
            seed=seed,
            template=device_template(device),
        )
        fov_mm = DEVICE_PRESETS[device].fov_mm
        outcome = RunOutcome()
        entries = []
        for eye in cohort.eyes:
            image_path = self.out_dir / "images" / f"{eye.eye_id}.pgm"
            mask_path = self.out_dir / "masks" / f"{eye.eye_id}.pgm"
            save_gray(eye.image, image_path)
            save_mask(eye.truth.mask, mask_path)
            write_sidecar(
                image_path, Sidecar(fov_mm=fov_mm, device=device, eye_id=eye.eye_id, cohort=eye.cohort)
            )
            roi_path = None
            if not np.all(eye.truth.mask.roi.included):
                roi_path = self.out_dir / "rois" / f"{eye.eye_id}.pgm"
                save_roi(eye.truth.mask.roi, roi_path)
            entries.append(
                ManifestEntry(
                    eye_id=eye.eye_id,
                    cohort=eye.cohort,
                    image_path=image_path,
                    mask_path=mask_path,
                    roi_path=roi_path,
                )
            )
            outcome.outputs.append(str(image_path))
            EYES_PROCESSED.labels(stage="synth").inc()
        manifest_path = self.out_dir / "manifest.csv"
        truth_path = self.out_dir / "truth.csv"
        write_manifest(entries, manifest_path)
        write_metrics_csv(cohort.truth_rows, truth_path)
        outcome.outputs = [str(manifest_path), str(truth_path)] + outcome.outputs
        logger.info(f"Synthesised {len(cohort.eyes)} {device} eyes into {self.out_dir}")
        return outcome
