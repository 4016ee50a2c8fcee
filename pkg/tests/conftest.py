"""Pytest configuration and shared fixtures."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from octa.main import app
from octa.services.synth import FazEllipse, SynthParams, generate
from octa.utils.manifest import ManifestEntry, write_manifest
from octa.utils.raster import BinaryMask, GrayImage, RoiMask, save_gray, save_mask


def ellipse_indicator(shape, cx, cy, a, b, rotation_deg=0.0) -> np.ndarray:
    """Pixels whose centre lies inside the ellipse."""
    rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]]
    t = np.deg2rad(rotation_deg)
    u = (cols - cx) * np.cos(t) + (rows - cy) * np.sin(t)
    v = -(cols - cx) * np.sin(t) + (rows - cy) * np.cos(t)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def lattice_with_hole(shape, cx, cy, a, b, spacing=8, rotation_deg=0.0) -> BinaryMask:
    """Vessel lattice (1 px lines every ``spacing`` px) with an elliptical avascular hole.

    A 2 px vessel ring closes the hole so it is its own non-vessel component.
    """
    vessel = np.zeros(shape, dtype=bool)
    vessel[::spacing, :] = True
    vessel[:, ::spacing] = True
    hole = ellipse_indicator(shape, cx, cy, a, b, rotation_deg)
    ring = ellipse_indicator(shape, cx, cy, a + 2.5, b + 2.5, rotation_deg) & ~hole
    vessel[ring] = True
    vessel[hole] = False
    return BinaryMask(vessel=vessel, roi=RoiMask.full(*shape))


@pytest.fixture
def client():
    """Create FastAPI test client."""
    return TestClient(app)


@pytest.fixture
def ellipse_mask() -> BinaryMask:
    """200x200 lattice with a 50 x 30 px elliptical FAZ centred between pixels."""
    return lattice_with_hole((200, 200), 99.5, 99.5, 50, 30)


@pytest.fixture
def gradient_image() -> GrayImage:
    """Smooth non-constant 64x64 test image."""
    rows, cols = np.mgrid[0:64, 0:64]
    data = 0.5 + 0.25 * np.sin(rows / 5.0) * np.cos(cols / 7.0)
    return GrayImage(data=data, scale_mm_per_px=0.01)


@pytest.fixture
def small_synth_params() -> SynthParams:
    """Fast 96x96 angiogram with a round FAZ."""
    return SynthParams(
        width=96,
        height=96,
        scale_mm_per_px=0.01,
        faz=FazEllipse(cx=47.5, cy=47.5, a=16, b=12),
        target_fraction=0.4,
        seed=3,
    )


SYNTH_EYES = {
    "d1": ("diabetic", FazEllipse(cx=47.5, cy=47.5, a=22, b=14, rotation_deg=10), 3),
    "d2": ("diabetic", FazEllipse(cx=46.0, cy=48.0, a=21, b=13), 4),
    "h1": ("healthy", FazEllipse(cx=47.5, cy=47.5, a=18, b=15), 1),
    "h2": ("healthy", FazEllipse(cx=48.0, cy=47.0, a=17, b=16), 2),
}

DATASET_CONFIG = "preset=custom\nfov_mm=0.96\nsamples=96\npreprocess=false\n"


def write_truth_maps(dataset, maps_dir) -> None:
    """Save every ground-truth mask as a perfect confidence map."""
    for eye_id, truth in dataset["truths"].items():
        save_gray(GrayImage(data=truth.mask.vessel.astype(float)), maps_dir / f"{eye_id}.pgm", bits=16)


@pytest.fixture
def octa_dataset(tmp_path):
    """Four 96x96 synthetic eyes (0.01 mm/px) with manifest, masks and a custom-preset config."""
    root = tmp_path / "data"
    entries = []
    truths = {}
    for eye_id, (cohort, faz, seed) in SYNTH_EYES.items():
        params = SynthParams(
            width=96,
            height=96,
            scale_mm_per_px=0.01,
            faz=faz,
            target_fraction=0.5,
            seed=seed,
        )
        image, truth = generate(params)
        entry = ManifestEntry(
            eye_id=eye_id,
            cohort=cohort,
            image_path=root / "images" / f"{eye_id}.pgm",
            mask_path=root / "masks" / f"{eye_id}.pgm",
        )
        save_gray(image, entry.image_path)
        save_mask(truth.mask, entry.mask_path)
        entries.append(entry)
        truths[eye_id] = truth
    write_manifest(entries, root / "manifest.csv")
    config = root / "run.conf"
    config.write_text(DATASET_CONFIG)
    return {"root": root, "manifest": root / "manifest.csv", "config": config, "truths": truths}
