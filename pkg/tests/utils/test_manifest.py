"""Tests for manifests, sidecars and metrics CSV files."""

import pytest

from octa.exceptions import ConfigError, FovMismatchError, SchemaError
from octa.models import MetricsRow
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


def _row(eye_id="e1", cohort="healthy", rater="manual", **overrides) -> MetricsRow:
    values = dict(area_mm2=0.3, d_min_mm=0.5, d_max_mm=0.7, eccentricity=0.7, density=0.5)
    values.update(overrides)
    return MetricsRow(eye_id=eye_id, cohort=cohort, rater=rater, **values)


def test_read_manifest_resolves_relative_paths(tmp_path):
    """Test manifest parsing with comments, a header and an optional ROI column."""
    manifest = tmp_path / "m.csv"
    manifest.write_text(
        "eye_id,cohort,image_path,manual_mask_path\n"
        "# comment\n"
        "e1,healthy,img/e1.pgm,mask/e1.pgm\n"
        "\n"
        "e2,diabetic,img/e2.pgm,mask/e2.pgm,roi/e2.pgm\n"
    )
    entries = read_manifest(manifest)
    assert [e.eye_id for e in entries] == ["e1", "e2"]
    assert entries[0].image_path == tmp_path / "img" / "e1.pgm"
    assert entries[0].roi_path is None
    assert entries[1].roi_path == tmp_path / "roi" / "e2.pgm"


def test_read_manifest_reports_line_numbers(tmp_path):
    """Test that malformed lines and duplicates carry their line number."""
    manifest = tmp_path / "m.csv"
    manifest.write_text("e1,healthy,a.pgm,b.pgm\ne2,healthy,a.pgm\n")
    with pytest.raises(SchemaError) as exc:
        read_manifest(manifest)
    assert exc.value.line == 2

    manifest.write_text("e1,healthy,a.pgm,b.pgm\ne1,healthy,c.pgm,d.pgm\n")
    with pytest.raises(SchemaError) as exc:
        read_manifest(manifest)
    assert exc.value.line == 2


def test_read_manifest_missing_file(tmp_path):
    """Test that a missing manifest is a configuration error."""
    with pytest.raises(ConfigError):
        read_manifest(tmp_path / "nope.csv")


def test_write_manifest_round_trip(tmp_path):
    """Test that written manifests read back to the same entries."""
    entries = [
        ManifestEntry(
            eye_id="e1",
            cohort="healthy",
            image_path=tmp_path / "images" / "e1.pgm",
            mask_path=tmp_path / "masks" / "e1.pgm",
        )
    ]
    write_manifest(entries, tmp_path / "manifest.csv")
    assert (tmp_path / "manifest.csv").read_text() == "e1,healthy,images/e1.pgm,masks/e1.pgm\n"
    assert read_manifest(tmp_path / "manifest.csv")[0].image_path == tmp_path / "images" / "e1.pgm"


def test_sidecar_round_trip(tmp_path):
    """Test sidecar write/read and unknown-key rejection."""
    image = tmp_path / "e1.pgm"
    path = write_sidecar(image, Sidecar(fov_mm=3.0, device="zeiss", eye_id="e1", cohort="healthy"))
    assert path == tmp_path / "e1.meta"
    meta = read_sidecar(image)
    assert meta.fov_mm == 3.0
    assert meta.device == "zeiss"
    assert read_sidecar(tmp_path / "other.pgm") is None

    path.write_text("fov_mm=3.0\nlaser=on\n")
    with pytest.raises(ConfigError):
        read_sidecar(image)


def test_check_field_of_view(tmp_path):
    """Test that sidecars must agree with the preset and with each other."""
    a = ManifestEntry(eye_id="a", cohort="h", image_path=tmp_path / "a.pgm", mask_path=tmp_path / "am.pgm")
    b = ManifestEntry(eye_id="b", cohort="h", image_path=tmp_path / "b.pgm", mask_path=tmp_path / "bm.pgm")
    write_sidecar(a.image_path, Sidecar(fov_mm=3.0, device="zeiss"))
    write_sidecar(b.image_path, Sidecar(fov_mm=3.0, device="zeiss"))
    check_field_of_view([a, b], 3.0)

    with pytest.raises(FovMismatchError):
        check_field_of_view([a, b], 2.0)

    write_sidecar(b.image_path, Sidecar(fov_mm=3.0, device="optovue"))
    with pytest.raises(FovMismatchError):
        check_field_of_view([a, b], 3.0)


def test_metrics_csv_round_trip(tmp_path):
    """Test sorted output and validated input."""
    rows = [_row("e2", rater="automated"), _row("e1"), _row("e1", rater="automated")]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "eye_id,cohort,rater,area_mm2,d_min_mm,d_max_mm,eccentricity,density"
    assert [line.split(",")[:3] for line in lines[1:]] == [
        ["e1", "healthy", "automated"],
        ["e1", "healthy", "manual"],
        ["e2", "healthy", "automated"],
    ]
    loaded = read_metrics_csv(path)
    assert len(loaded) == 3
    assert loaded[0].area_mm2 == pytest.approx(0.3)


def test_metrics_csv_schema_errors(tmp_path):
    """Test header and row validation with line numbers."""
    path = tmp_path / "metrics.csv"
    path.write_text("eye_id,cohort,rater\ne1,healthy,manual\n")
    with pytest.raises(SchemaError) as exc:
        read_metrics_csv(path)
    assert exc.value.line == 1

    path.write_text(
        "eye_id,cohort,rater,area_mm2,d_min_mm,d_max_mm,eccentricity,density\n"
        "e1,healthy,manual,0.3,0.5,0.7,0.7,0.5\n"
        "e2,healthy,robot,0.3,0.5,0.7,0.7,0.5\n"
    )
    with pytest.raises(SchemaError) as exc:
        read_metrics_csv(path)
    assert exc.value.line == 3
