"""Tests for the end-to-end pipeline stages."""

import json
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from octa.config import RunConfig
from octa.exceptions import ConfigError, FovMismatchError, PairingError
from octa.services.binarize import otsu, threshold_map
from octa.services.pipeline import PipelineService
from octa.services.segnet import ConfidenceMap
from octa.utils.manifest import read_manifest, read_metrics_csv
from octa.utils.raster import BinaryMask, GrayImage, RoiMask, load_gray, save_gray, save_mask
from tests.conftest import write_truth_maps


def _service(dataset, out_dir, **overrides) -> PipelineService:
    config = RunConfig.from_file(dataset["config"], **overrides)
    return PipelineService(config, out_dir)


def test_load_eyes_groups_by_cohort(octa_dataset, tmp_path):
    """Test manifest loading at the configured pixel scale."""
    eyes = _service(octa_dataset, tmp_path / "out").load_eyes(octa_dataset["manifest"])
    assert [e.entry.eye_id for e in eyes] == ["d1", "d2", "h1", "h2"]
    assert eyes[0].group == "diabetic"
    assert eyes[0].image.scale_mm_per_px == pytest.approx(0.01)


def test_quantify_perfect_maps(octa_dataset, tmp_path):
    """Test that perfect confidence maps reproduce the manual metrics."""
    maps = tmp_path / "maps"
    write_truth_maps(octa_dataset, maps)
    out = tmp_path / "out"
    outcome = _service(octa_dataset, out).quantify(octa_dataset["manifest"], maps)

    assert not outcome.partial
    assert outcome.outputs[0] == str(out / "metrics.csv")
    rows = read_metrics_csv(out / "metrics.csv")
    assert len(rows) == 8
    by_key = {(r.eye_id, r.rater): r for r in rows}
    for eye_id, truth in octa_dataset["truths"].items():
        manual, automated = by_key[(eye_id, "manual")], by_key[(eye_id, "automated")]
        assert automated.area_mm2 == manual.area_mm2
        assert automated.density == pytest.approx(truth.vessel_fraction, abs=1e-6)
    assert (out / "overlays" / "h1.ppm").read_bytes().startswith(b"P6\n96 96\n255\n")
    assert (out / "predicted" / "d2.pgm").is_file()
    assert (out / "exceptions.log").read_text() == ""


def test_quantify_excludes_eyes_without_maps(octa_dataset, tmp_path):
    """Test that a missing map excludes only that eye."""
    maps = tmp_path / "maps"
    write_truth_maps(octa_dataset, maps)
    (maps / "h2.pgm").unlink()
    out = tmp_path / "out"
    outcome = _service(octa_dataset, out).quantify(octa_dataset["manifest"], maps)

    assert outcome.partial
    assert [f.eye_id for f in outcome.failures] == ["h2"]
    assert {r.eye_id for r in read_metrics_csv(out / "metrics.csv")} == {"d1", "d2", "h1"}
    assert (out / "exceptions.log").read_text().startswith("h2\tquantify\t")


def test_quantify_excludes_eyes_with_wrong_map_size(octa_dataset, tmp_path):
    """Test that a confidence map of the wrong size excludes only that eye."""
    maps = tmp_path / "maps"
    write_truth_maps(octa_dataset, maps)
    save_gray(GrayImage(data=np.zeros((50, 50))), maps / "h2.pgm", bits=16)
    out = tmp_path / "out"
    outcome = _service(octa_dataset, out).quantify(octa_dataset["manifest"], maps)

    assert outcome.partial
    assert [f.eye_id for f in outcome.failures] == ["h2"]
    assert {r.eye_id for r in read_metrics_csv(out / "metrics.csv")} == {"d1", "d2", "h1"}
    log = (out / "exceptions.log").read_text()
    assert log.startswith("h2\tquantify\tRasterShapeError: ")
    assert "(50, 50)" in log


def test_evaluate_predicted_masks(octa_dataset, tmp_path):
    """Test agreement files for masks that match the manual tracing."""
    maps = tmp_path / "maps"
    write_truth_maps(octa_dataset, maps)
    out = tmp_path / "out"
    service = _service(octa_dataset, out)
    service.quantify(octa_dataset["manifest"], maps)

    outcome = service.evaluate(octa_dataset["manifest"], out / "predicted")
    assert not outcome.partial
    per_image = pd.read_csv(out / "agreement.csv")
    assert list(per_image["eye_id"]) == ["d1", "d2", "h1", "h2"]
    assert (per_image["accuracy"] == 1.0).all()
    summary = pd.read_csv(out / "agreement_summary.csv")
    assert list(summary["group"]) == ["diabetic", "healthy"]


def test_evaluate_requires_pairs(octa_dataset, tmp_path):
    """Test that predictions and manifest eyes must pair up."""
    pred = tmp_path / "pred"
    write_truth_maps(octa_dataset, pred)
    (pred / "d1.pgm").unlink()
    with pytest.raises(PairingError) as exc:
        _service(octa_dataset, tmp_path / "out").evaluate(octa_dataset["manifest"], pred)
    assert exc.value.eye_ids == ["d1"]


def test_evaluate_excludes_eyes_with_wrong_mask_size(octa_dataset, tmp_path):
    """Test that a predicted mask of the wrong size excludes only that eye."""
    pred = tmp_path / "pred"
    write_truth_maps(octa_dataset, pred)
    save_mask(BinaryMask(vessel=np.zeros((50, 50), dtype=bool), roi=RoiMask.full(50, 50)), pred / "h1.pgm")
    out = tmp_path / "out"
    outcome = _service(octa_dataset, out).evaluate(octa_dataset["manifest"], pred)

    assert outcome.partial
    assert [(f.eye_id, f.stage) for f in outcome.failures] == [("h1", "evaluate")]
    assert "RasterShapeError" in outcome.failures[0].error
    per_image = pd.read_csv(out / "agreement.csv")
    assert list(per_image["eye_id"]) == ["d1", "d2", "h2"]
    assert (per_image["accuracy"] == 1.0).all()


def test_stats_and_report(octa_dataset, tmp_path):
    """Test report.json, report.txt and the agreement section of the report."""
    maps = tmp_path / "maps"
    write_truth_maps(octa_dataset, maps)
    out = tmp_path / "out"
    service = _service(octa_dataset, out)
    service.quantify(octa_dataset["manifest"], maps)
    service.evaluate(octa_dataset["manifest"], out / "predicted")

    service.stats(out / "metrics.csv")
    payload = json.loads((out / "report.json").read_text())
    assert payload["schema"] == "octa-cohort-report/1"
    area = next(a for a in payload["agreement"] if a["metric"] == "area_mm2" and a["cohort"] == "healthy")
    assert area["icc"] == pytest.approx(1.0)
    assert area["paired_t"] is None

    service.report(out / "metrics.csv", out / "agreement.csv")
    text = (out / "report.txt").read_text()
    assert "Healthy (n = 2)" in text
    assert "Segmentation agreement" in text

    with pytest.raises(ConfigError):
        service.report(out / "metrics.csv", out / "missing.csv")


def test_train_then_segment(octa_dataset, tmp_path):
    """Test split-half training outputs and segmentation with a saved fold model."""
    out = tmp_path / "out"
    service = _service(
        octa_dataset, out, architecture="small", epochs=1, patches_per_class=40, batch_size=16
    )
    outcome = service.train(octa_dataset["manifest"])
    assert not outcome.partial
    assert (out / "models" / "fold_a.octanet").is_file()
    folds = pd.read_csv(out / "folds.csv")
    assert list(folds["trained_in"]) == ["A", "A", "B", "B"]
    assert list(folds["segmented_by"]) == ["B", "B", "A", "A"]
    losses = pd.read_csv(out / "train_loss.csv")
    assert list(losses["fold"]) == ["A", "B"]
    assert load_gray(out / "confidence" / "h1.pgm").shape == (96, 96)

    seg_out = tmp_path / "seg"
    result = _service(octa_dataset, seg_out).segment(out / "models" / "fold_a.octanet", octa_dataset["manifest"])
    assert not result.partial
    assert sorted(p.name for p in (seg_out / "confidence").iterdir()) == ["d1.pgm", "d2.pgm", "h1.pgm", "h2.pgm"]


def test_segment_refuses_other_field_of_view(octa_dataset, tmp_path):
    """Test that a model trained at one pixel scale cannot segment another."""
    out = tmp_path / "out"
    _service(octa_dataset, out, architecture="small", epochs=1, patches_per_class=20).train(octa_dataset["manifest"])
    wide = _service(octa_dataset, tmp_path / "seg", fov_mm=1.92)
    with pytest.raises(FovMismatchError):
        wide.segment(out / "models" / "fold_a.octanet", octa_dataset["manifest"])


def test_segment_excludes_eyes_whose_map_fails_validation(octa_dataset, tmp_path):
    """Test that a map rejected by validation excludes only that eye from segmentation."""
    calls = []

    def fake_segment(model, img, roi, batch_size):
        calls.append(roi.shape)
        shape = (50, 50) if len(calls) == 4 else roi.shape
        return ConfidenceMap(values=np.full(shape, 0.5), roi=roi, scale_mm_per_px=img.scale_mm_per_px)

    out = tmp_path / "out"
    with (
        patch("octa.services.pipeline.load_model", return_value=None),
        patch("octa.services.pipeline.segment_image", side_effect=fake_segment),
    ):
        outcome = _service(octa_dataset, out).segment(tmp_path / "unused.octanet", octa_dataset["manifest"])

    assert len(calls) == 4
    assert [(f.eye_id, f.stage) for f in outcome.failures] == [("h2", "segment")]
    assert sorted(p.name for p in (out / "confidence").iterdir()) == ["d1.pgm", "d2.pgm", "h1.pgm"]
    assert (out / "exceptions.log").read_text().startswith("h2\tsegment\t")


@pytest.mark.slow
def test_synth_writes_cohort(tmp_path):
    """Test synthetic cohort files for a device preset."""
    service = PipelineService(RunConfig(preset="zeiss3mm245"), tmp_path)
    outcome = service.synth(n_each=2, seed=5)
    assert outcome.outputs[:2] == [str(tmp_path / "manifest.csv"), str(tmp_path / "truth.csv")]
    entries = read_manifest(tmp_path / "manifest.csv")
    assert [e.eye_id for e in entries] == ["healthy-001", "healthy-002", "diabetic-001", "diabetic-002"]
    assert all(e.roi_path is None for e in entries)
    assert (tmp_path / "images" / "healthy-001.meta").read_text().count("device=zeiss") == 1
    assert len(read_metrics_csv(tmp_path / "truth.csv")) == 4


def test_synth_requires_device_preset(tmp_path):
    """Test that a custom preset has no synthetic cohort."""
    service = PipelineService(RunConfig(preset="custom", fov_mm=1.0, samples=100), tmp_path)
    with pytest.raises(ConfigError):
        service.synth(n_each=2)


def _run_everything(dataset, out_dir) -> None:
    service = _service(dataset, out_dir, architecture="small", epochs=4, patches_per_class=300, batch_size=32)
    service.train(dataset["manifest"])
    service.quantify(dataset["manifest"], out_dir / "confidence")
    service.evaluate(dataset["manifest"], out_dir / "predicted")
    service.stats(out_dir / "metrics.csv")
    service.report(out_dir / "metrics.csv", out_dir / "agreement.csv")


@pytest.mark.slow
def test_full_pipeline_reruns_are_byte_identical(octa_dataset, tmp_path):
    """Test that two runs with one config and seed write identical models, CSVs, reports and overlays."""
    first, second = tmp_path / "first", tmp_path / "second"
    _run_everything(octa_dataset, first)
    _run_everything(octa_dataset, second)

    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
    names = {str(p) for p in files}
    assert {"models/fold_a.octanet", "metrics.csv", "agreement.csv", "report.json", "report.txt"} <= names
    assert any(name.startswith("overlays/") for name in names)
    for relative in files:
        assert (first / relative).read_bytes() == (second / relative).read_bytes(), relative


@pytest.mark.slow
def test_end_to_end_segmentation_accuracy(tmp_path):
    """Test split-half segmentation of a 20-eye synthetic cohort against its truth masks."""
    config = RunConfig(
        preset="zeiss3mm245",
        architecture="small",
        epochs=5,
        patches_per_class=2000,
        batch_size=32,
        preprocess=False,
    )
    cohort = tmp_path / "cohort"
    PipelineService(config, cohort).synth(n_each=10, seed=1)
    out = tmp_path / "out"
    service = PipelineService(config, out)
    assert not service.train(cohort / "manifest.csv").partial

    pred = tmp_path / "pred"
    for path in sorted((out / "confidence").glob("*.pgm")):
        values = load_gray(path).data
        cmap = ConfidenceMap(values=values, roi=RoiMask.full(*values.shape))
        save_mask(threshold_map(cmap, otsu(cmap).threshold), pred / path.name)

    assert not service.evaluate(cohort / "manifest.csv", pred).partial
    per_image = pd.read_csv(out / "agreement.csv")
    assert len(per_image) == 20
    assert per_image["accuracy"].mean() >= 0.85
    assert per_image["sensitivity"].mean() >= 0.80
    assert per_image["specificity"].mean() >= 0.80
