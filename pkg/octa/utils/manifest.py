"""Dataset manifests, per-image sidecar metadata and metrics CSV files."""

import csv
import logging
import math
from pathlib import Path
from typing import Optional, Union

import pandas as pd
from dotenv import dotenv_values
from pydantic import BaseModel, Field, ValidationError

from octa.exceptions import ConfigError, FovMismatchError, SchemaError
from octa.models import METRICS_COLUMNS, MetricsRow

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SIDECAR_SUFFIX = ".meta"
SIDECAR_KEYS = ("fov_mm", "device", "eye_id", "cohort")


class ManifestEntry(BaseModel):
    """One eye of a dataset manifest; paths are resolved against the manifest's directory."""

    eye_id: str = Field(min_length=1)
    cohort: str = Field(min_length=1)
    image_path: Path
    mask_path: Path
    roi_path: Optional[Path] = None


class Sidecar(BaseModel):
    fov_mm: Optional[float] = Field(default=None, gt=0)
    device: Optional[str] = None
    eye_id: Optional[str] = None
    cohort: Optional[str] = None


def read_manifest(path: PathLike) -> list[ManifestEntry]:
    """
    Read ``eye_id,cohort,image_path,manual_mask_path[,roi_path]`` lines.

    Blank lines and ``#`` comments are skipped, as is a header line starting
    with ``eye_id``.

    Raises:
        ConfigError: the manifest does not exist
        SchemaError: a malformed line or a duplicated eye id, with its line number
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as f:
        for line_no, fields in enumerate(csv.reader(f), start=1):
            fields = [v.strip() for v in fields]
            if not fields or not any(fields) or fields[0].startswith("#"):
                continue
            if line_no == 1 and fields[0] == "eye_id":
                continue
            if len(fields) not in (4, 5) or not all(fields):
                raise SchemaError(
                    f"expected eye_id,cohort,image_path,manual_mask_path[,roi_path], got {len(fields)} fields",
                    line=line_no,
                )
            eye_id, cohort, image, mask = fields[:4]
            if eye_id in seen:
                raise SchemaError(f"duplicate eye id {eye_id!r}", line=line_no)
            seen.add(eye_id)
            entries.append(
                ManifestEntry(
                    eye_id=eye_id,
                    cohort=cohort,
                    image_path=base / image,
                    mask_path=base / mask,
                    roi_path=base / fields[4] if len(fields) == 5 else None,
                )
            )
    logger.debug(f"Read {len(entries)} entries from {path}")
    return entries


def write_manifest(entries: list[ManifestEntry], path: PathLike) -> None:
    """Write entries with paths relative to the manifest's directory where possible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        try:
            return Path(p).resolve().relative_to(base).as_posix()
        except ValueError:
            return str(p)

    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        for e in entries:
            row = [e.eye_id, e.cohort, rel(e.image_path), rel(e.mask_path)]
            if e.roi_path is not None:
                row.append(rel(e.roi_path))
            writer.writerow(row)


def sidecar_path(image_path: PathLike) -> Path:
    return Path(image_path).with_suffix(SIDECAR_SUFFIX)


def read_sidecar(image_path: PathLike) -> Optional[Sidecar]:
    """Metadata next to an image, or None when there is no sidecar."""
    path = sidecar_path(image_path)
    if not path.is_file():
        return None
    values = {k: v for k, v in dotenv_values(path).items() if v is not None}
    unknown = sorted(set(values) - set(SIDECAR_KEYS))
    if unknown:
        raise ConfigError(f"unknown sidecar keys in {path}: {', '.join(unknown)}")
    try:
        return Sidecar(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid sidecar {path}: {e}") from e


def write_sidecar(image_path: PathLike, meta: Sidecar) -> Path:
    path = sidecar_path(image_path)
    lines = [f"{k}={v}" for k, v in meta.model_dump().items() if v is not None]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def check_field_of_view(entries: list[ManifestEntry], fov_mm: float) -> None:
    """
    Refuse manifests whose sidecars disagree with each other or with ``fov_mm``.

    Raises:
        FovMismatchError: listing the offending eyes
    """
    mismatched = []
    devices = set()
    for e in entries:
        meta = read_sidecar(e.image_path)
        if meta is None:
            continue
        if meta.fov_mm is not None and not math.isclose(meta.fov_mm, fov_mm, rel_tol=1e-9):
            mismatched.append(e.eye_id)
        if meta.device:
            devices.add(meta.device)
    if mismatched:
        raise FovMismatchError(
            f"eyes {', '.join(mismatched)} were not scanned at {fov_mm} mm; "
            "a training set is needed for each field of view"
        )
    if len(devices) > 1:
        raise FovMismatchError(
            f"manifest mixes devices {', '.join(sorted(devices))}; "
            "a training set is needed for each field of view"
        )


def read_metrics_csv(path: PathLike) -> list[MetricsRow]:
    """
    Read and validate a metrics CSV.

    Raises:
        ConfigError: the file does not exist
        SchemaError: wrong header or an invalid row, with its line number
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"metrics CSV not found: {path}")
    frame = pd.read_csv(path, dtype={"eye_id": str, "cohort": str, "rater": str})
    if list(frame.columns) != METRICS_COLUMNS:
        raise SchemaError(f"expected columns {','.join(METRICS_COLUMNS)}", line=1)
    rows = []
    for offset, record in enumerate(frame.to_dict(orient="records")):
        try:
            rows.append(MetricsRow(**record))
        except ValidationError as e:
            raise SchemaError(str(e), line=offset + 2) from e
    return rows


def write_metrics_csv(rows: list[MetricsRow], path: PathLike) -> None:
    """Write rows sorted by (cohort, eye_id, rater)."""
    frame = pd.DataFrame.from_records([r.model_dump() for r in rows], columns=METRICS_COLUMNS)
    frame = frame.sort_values(["cohort", "eye_id", "rater"], kind="mergesort")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
