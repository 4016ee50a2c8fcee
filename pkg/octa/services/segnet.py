"""Patch-based convolutional vessel classifier written directly on numpy.

Layers are stateless: ``forward`` returns its output together with a cache
that ``backward`` consumes, so one model can serve concurrent inference.
Tensors are laid out as (batch, channels, rows, cols). Label 1 is vessel.
"""

import json
import logging
import math
import struct
import zlib
from collections.abc import Sequence
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import log_softmax, softmax

from octa.exceptions import (
    ArgumentError,
    DivergenceError,
    FovMismatchError,
    InsufficientClassPixelsError,
    ModelChecksumError,
    ModelFormatError,
    ModelShapeError,
)
from octa.services.preprocess import PreprocessParams, preprocess
from octa.utils.raster import BinaryMask, GrayImage, RoiMask, mirror_pad
from octa.utils.telemetry import TRAINING_EPOCHS

logger = logging.getLogger(__name__)

VESSEL = 1
NONVESSEL = 0

MODEL_MAGIC = b"OCTANET1\n"
MODEL_FORMAT_VERSION = 1

ARCHITECTURE_PATCH_SIDES = {"default": 33, "small": 9}

Seed = Union[int, Sequence[int]]


# Layers


class Layer:
    kind = "layer"

    @property
    def params(self) -> list[np.ndarray]:
        return []

    def describe(self) -> dict:
        return {"type": self.kind}


class Conv2D(Layer):
    """Valid (unpadded) stride-1 convolution."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.W = np.zeros((out_channels, in_channels, kernel, kernel))
        self.b = np.zeros(out_channels)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W, self.b]

    @property
    def fans(self) -> tuple[int, int]:
        area = self.kernel * self.kernel
        return self.in_channels * area, self.out_channels * area

    def describe(self) -> dict:
        return {
            "type": self.kind,
            "kernel": self.kernel,
            "in": self.in_channels,
            "out": self.out_channels,
        }

    def forward(self, x: np.ndarray):
        k = self.kernel
        windows = sliding_window_view(x, (k, k), axis=(2, 3))
        out = np.tensordot(windows, self.W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        return out + self.b[None, :, None, None], windows

    def backward(self, windows: np.ndarray, grad: np.ndarray, need_input_grad: bool = True):
        k = self.kernel
        dW = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        db = grad.sum(axis=(0, 2, 3))
        if not need_input_grad:
            return None, [dW, db]
        padded = np.pad(grad, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        grad_windows = sliding_window_view(padded, (k, k), axis=(2, 3))
        flipped = self.W[:, :, ::-1, ::-1]
        dx = np.tensordot(grad_windows, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        return dx, [dW, db]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray):
        active = x > 0
        return np.where(active, x, 0.0), active

    def backward(self, active: np.ndarray, grad: np.ndarray, need_input_grad: bool = True):
        return grad * active, []


class MaxPool2x2(Layer):
    """2x2 max-pooling with stride 2; a trailing odd row/column is dropped."""

    kind = "maxpool"

    def forward(self, x: np.ndarray):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = (
            x[:, :, : h2 * 2, : w2 * 2]
            .reshape(n, c, h2, 2, w2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h2, w2, 4)
        )
        winner = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]
        return out, (x.shape, winner)

    def backward(self, cache, grad: np.ndarray, need_input_grad: bool = True):
        shape, winner = cache
        n, c, h2, w2 = winner.shape
        blocks = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(blocks, winner[..., None], grad[..., None], axis=-1)
        dx = np.zeros(shape)
        dx[:, :, : h2 * 2, : w2 * 2] = (
            blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
        )
        return dx, []


class Dense(Layer):
    """Fully-connected layer; flattens (channels, rows, cols) inputs."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.W = np.zeros((in_features, out_features))
        self.b = np.zeros(out_features)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W, self.b]

    @property
    def fans(self) -> tuple[int, int]:
        return self.in_features, self.out_features

    def describe(self) -> dict:
        return {"type": self.kind, "in": self.in_features, "out": self.out_features}

    def forward(self, x: np.ndarray):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.W + self.b, (x.shape, flat)

    def backward(self, cache, grad: np.ndarray, need_input_grad: bool = True):
        shape, flat = cache
        grads = [flat.T @ grad, grad.sum(axis=0)]
        if not need_input_grad:
            return None, grads
        return (grad @ self.W.T).reshape(shape), grads


def _build_layer(spec: dict) -> Layer:
    kind = spec.get("type")
    if kind == "conv":
        return Conv2D(int(spec["in"]), int(spec["out"]), int(spec["kernel"]))
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool2x2()
    if kind == "dense":
        return Dense(int(spec["in"]), int(spec["out"]))
    raise ModelShapeError(f"unknown layer type {kind!r}")


def check_architecture(descriptor: list[dict], patch_side: int) -> None:
    """Walk the layer list from a patch_side x patch_side x 1 input to 2 outputs."""
    if patch_side < 3 or patch_side % 2 == 0:
        raise ModelShapeError(f"patch_side must be odd and >= 3, got {patch_side}")
    shape: tuple[int, ...] = (1, patch_side, patch_side)
    for i, spec in enumerate(descriptor):
        kind = spec.get("type")
        if kind == "conv":
            c, h, w = shape if len(shape) == 3 else (None, 0, 0)
            k = int(spec["kernel"])
            if c != spec["in"] or h < k or w < k:
                raise ModelShapeError(f"layer {i}: conv {spec} does not fit input {shape}")
            shape = (int(spec["out"]), h - k + 1, w - k + 1)
        elif kind == "maxpool":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ModelShapeError(f"layer {i}: cannot pool input {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "dense":
            if int(np.prod(shape)) != spec["in"]:
                raise ModelShapeError(f"layer {i}: dense expects {spec['in']} inputs, got {shape}")
            shape = (int(spec["out"]),)
        elif kind != "relu":
            raise ModelShapeError(f"layer {i}: unknown layer type {kind!r}")
    if shape != (2,):
        raise ModelShapeError(f"network must end in 2 outputs, ends in {shape}")


def build_architecture(name: str, patch_side: Optional[int] = None) -> list[dict]:
    """
    Layer descriptor of a named architecture.

    ``default``: conv 5x5x16, relu, pool, conv 5x5x32, relu, pool, dense 64, relu, dense 2.
    ``small``: conv 3x3x4, relu, pool, dense 16, relu, dense 2.
    """
    if name not in ARCHITECTURE_PATCH_SIDES:
        raise ArgumentError(f"unknown architecture {name!r}")
    side = patch_side or ARCHITECTURE_PATCH_SIDES[name]
    if name == "default":
        s = ((side - 4) // 2 - 4) // 2
        layers = [
            {"type": "conv", "kernel": 5, "in": 1, "out": 16},
            {"type": "relu"},
            {"type": "maxpool"},
            {"type": "conv", "kernel": 5, "in": 16, "out": 32},
            {"type": "relu"},
            {"type": "maxpool"},
            {"type": "dense", "in": 32 * s * s, "out": 64},
            {"type": "relu"},
            {"type": "dense", "in": 64, "out": 2},
        ]
    else:
        s = (side - 2) // 2
        layers = [
            {"type": "conv", "kernel": 3, "in": 1, "out": 4},
            {"type": "relu"},
            {"type": "maxpool"},
            {"type": "dense", "in": 4 * s * s, "out": 16},
            {"type": "relu"},
            {"type": "dense", "in": 16, "out": 2},
        ]
    check_architecture(layers, side)
    return layers


class CnnModel:
    """Layered patch classifier plus the metadata needed to reuse it."""

    def __init__(
        self,
        descriptor: list[dict],
        patch_side: int,
        name: str = "custom",
        preprocessing: Optional[PreprocessParams] = None,
        seed: int = 0,
        scale_mm_per_px: Optional[float] = None,
    ):
        check_architecture(descriptor, patch_side)
        self.descriptor = [dict(spec) for spec in descriptor]
        self.layers = [_build_layer(spec) for spec in descriptor]
        self.patch_side = patch_side
        self.name = name
        self.preprocessing = preprocessing or PreprocessParams(enabled=False)
        self.seed = seed
        self.scale_mm_per_px = scale_mm_per_px

    @classmethod
    def initialize(
        cls, descriptor: list[dict], patch_side: int, seed: Seed = 0, **metadata
    ) -> "CnnModel":
        """Uniform +-sqrt(6 / (fan_in + fan_out)) weights from the seeded RNG; zero biases."""
        model = cls(descriptor, patch_side, seed=seed if isinstance(seed, int) else seed[0], **metadata)
        rng = np.random.default_rng(seed)
        for layer in model.layers:
            if isinstance(layer, (Conv2D, Dense)):
                fan_in, fan_out = layer.fans
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                layer.W[...] = rng.uniform(-bound, bound, size=layer.W.shape)
        return model

    @classmethod
    def named(cls, name: str, seed: Seed = 0, patch_side: Optional[int] = None, **metadata) -> "CnnModel":
        side = patch_side or ARCHITECTURE_PATCH_SIDES.get(name, 0)
        return cls.initialize(build_architecture(name, side), side, seed, name=name, **metadata)

    @property
    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters)

    def with_parameters(self, params: Sequence[np.ndarray]) -> "CnnModel":
        """Copy of this model carrying the given parameter arrays."""
        clone = CnnModel(
            self.descriptor,
            self.patch_side,
            name=self.name,
            preprocessing=self.preprocessing,
            seed=self.seed,
            scale_mm_per_px=self.scale_mm_per_px,
        )
        mine = clone.parameters
        if len(params) != len(mine):
            raise ModelShapeError(f"expected {len(mine)} parameter arrays, got {len(params)}")
        for dst, src in zip(mine, params):
            if dst.shape != np.shape(src):
                raise ModelShapeError(f"parameter shape {np.shape(src)} != {dst.shape}")
            dst[...] = src
        return clone

    def copy(self) -> "CnnModel":
        return self.with_parameters(self.parameters)

    def _check_patches(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim == 2:
            patches = patches[None]
        k = self.patch_side
        if patches.ndim != 3 or patches.shape[1:] != (k, k):
            raise ArgumentError(f"expected {k}x{k} patches, got shape {patches.shape}")
        return patches

    def _forward(self, patches: np.ndarray):
        x = patches[:, None, :, :]
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def logits(self, patches: np.ndarray) -> np.ndarray:
        return self._forward(self._check_patches(patches))[0]

    def predict_proba(self, patches: np.ndarray) -> np.ndarray:
        """Vessel probability for each patch in an (n, k, k) stack."""
        return softmax(self.logits(patches), axis=1)[:, VESSEL]

    def loss(self, patches: np.ndarray, labels: np.ndarray) -> float:
        logp = log_softmax(self.logits(patches), axis=1)
        return float(-np.mean(logp[np.arange(len(labels)), labels]))

    def loss_and_gradients(self, patches: np.ndarray, labels: np.ndarray) -> tuple[float, list[np.ndarray]]:
        """Mean cross-entropy and its gradient w.r.t. ``parameters`` (same order)."""
        patches = self._check_patches(patches)
        labels = np.asarray(labels)
        logits, caches = self._forward(patches)
        n = len(labels)
        rows = np.arange(n)
        loss = float(-np.mean(log_softmax(logits, axis=1)[rows, labels]))
        grad = softmax(logits, axis=1)
        grad[rows, labels] -= 1.0
        grad /= n

        grads: list[list[np.ndarray]] = []
        for i in range(len(self.layers) - 1, -1, -1):
            grad, layer_grads = self.layers[i].backward(caches[i], grad, need_input_grad=i > 0)
            grads.append(layer_grads)
        return loss, [g for layer_grads in reversed(grads) for g in layer_grads]


def forward(model: CnnModel, patch: np.ndarray) -> float:
    """Vessel probability of a single k x k patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (model.patch_side, model.patch_side):
        raise ArgumentError(f"patch shape {patch.shape} does not match model side {model.patch_side}")
    return float(model.predict_proba(patch[None])[0])


# Training data


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(default=64, ge=1)
    epochs: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    loss: Literal["cross-entropy"] = "cross-entropy"
    patches_per_class: int = Field(default=10000, ge=1, description="Per class per fold")
    architecture: Literal["default", "small"] = "default"
    patch_side: int = Field(default=33, ge=3)


class LabeledPatchSet(BaseModel):
    """Balanced set of labelled patches with their provenance."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    patches: np.ndarray = Field(description="(n, k, k) float64 patches")
    labels: np.ndarray = Field(description="(n,) labels, 1 = vessel")
    image_ids: tuple[str, ...]
    coords: np.ndarray = Field(description="(n, 2) (row, col) patch centres")

    @field_validator("patches", "labels", "coords", mode="before")
    @classmethod
    def _readonly(cls, value, info):
        dtype = np.float64 if info.field_name == "patches" else np.int64
        arr = np.array(value, dtype=dtype, copy=True)
        arr.flags.writeable = False
        return arr

    @model_validator(mode="after")
    def _check(self):
        n = len(self.labels)
        if n == 0:
            raise ValueError("patch set is empty")
        if self.patches.ndim != 3 or len(self.patches) != n or len(self.coords) != n or len(self.image_ids) != n:
            raise ValueError("patches, labels, coords and image_ids must have equal length")
        if not np.isin(self.labels, (NONVESSEL, VESSEL)).all():
            raise ValueError("labels must be 0 (non-vessel) or 1 (vessel)")
        if 2 * int(self.labels.sum()) != n:
            raise ValueError("patch set must be balanced between vessel and non-vessel")
        return self

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def concat(cls, sets: Sequence["LabeledPatchSet"]) -> "LabeledPatchSet":
        return cls(
            patches=np.concatenate([s.patches for s in sets]),
            labels=np.concatenate([s.labels for s in sets]),
            image_ids=tuple(i for s in sets for i in s.image_ids),
            coords=np.concatenate([s.coords for s in sets]),
        )


def _patches_at(data: np.ndarray, coords: np.ndarray, k: int) -> np.ndarray:
    windows = sliding_window_view(mirror_pad(data, k // 2), (k, k))
    return windows[coords[:, 0], coords[:, 1]]


def sample_balanced(
    img: GrayImage,
    gt: BinaryMask,
    n_per_class: int,
    seed: Seed,
    patch_side: int = 33,
    image_id: str = "image",
) -> LabeledPatchSet:
    """
    Draw ``n_per_class`` vessel and non-vessel patch centres uniformly without replacement.

    Args:
        img: Source image (already preprocessed)
        gt: Ground-truth mask; only ROI pixels are candidates
        n_per_class: Patches per class
        seed: RNG seed
        patch_side: Patch side k
        image_id: Provenance tag stored with every patch

    Raises:
        InsufficientClassPixelsError: fewer than n_per_class pixels in either class
    """
    if gt.shape != img.shape:
        raise ArgumentError(f"mask shape {gt.shape} does not match image shape {img.shape}")
    if n_per_class < 1:
        raise ArgumentError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    chosen = []
    for label, members in ((VESSEL, gt.vessel), (NONVESSEL, gt.nonvessel)):
        candidates = np.argwhere(members)
        if len(candidates) < n_per_class:
            name = "vessel" if label == VESSEL else "non-vessel"
            raise InsufficientClassPixelsError(
                f"{image_id}: {len(candidates)} {name} pixels, {n_per_class} requested"
            )
        chosen.append(candidates[rng.choice(len(candidates), size=n_per_class, replace=False)])
    coords = np.concatenate(chosen)
    labels = np.repeat([VESSEL, NONVESSEL], n_per_class)
    return LabeledPatchSet(
        patches=_patches_at(img.data, coords, patch_side),
        labels=labels,
        image_ids=(image_id,) * len(labels),
        coords=coords,
    )


# Training


def train(model: CnnModel, data: LabeledPatchSet, cfg: TrainConfig) -> tuple[CnnModel, list[float]]:
    """
    Mini-batch SGD with momentum on mean cross-entropy.

    Args:
        model: Starting point; not modified
        data: Balanced training patches
        cfg: Hyperparameters; ``cfg.seed`` drives the per-epoch shuffle

    Returns:
        Trained copy of the model and the per-epoch mean training loss

    Raises:
        DivergenceError: the loss became non-finite
    """
    trained = model.copy()
    params = trained.parameters
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    trace: list[float] = []

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = trained.loss_and_gradients(data.patches[idx], data.labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            total += loss * len(idx)
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p += v
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise DivergenceError(epoch, epoch_loss)
        trace.append(epoch_loss)
        TRAINING_EPOCHS.inc()
        logger.debug(f"Epoch {epoch}/{cfg.epochs}: loss {epoch_loss:.6f}")
    return trained, trace


def patch_accuracy(model: CnnModel, data: LabeledPatchSet) -> float:
    """Fraction of patches whose thresholded (0.5) prediction matches the label."""
    predicted = (model.predict_proba(data.patches) > 0.5).astype(np.int64)
    return float(np.mean(predicted == data.labels))


def grad_check(model: CnnModel, batch: LabeledPatchSet, epsilon: float = 1e-6) -> float:
    """
    Largest relative disagreement between backprop and central differences.

    Entries whose absolute difference is at or below the noise floor
    ``64 * np.spacing(abs(loss)) / epsilon`` are treated as rounding noise and
    skipped, so there the result departs from the plain relative-error formula
    below. With a loss near 0.7 and epsilon 1e-6 the floor is about 7e-9;
    gradients that are all zero therefore give 0.0.

    Args:
        model: Model with at most 5000 parameters
        batch: Patches to evaluate the loss on
        epsilon: Finite-difference step in [1e-7, 1e-4]

    Returns:
        max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ArgumentError(f"epsilon must lie in [1e-7, 1e-4], got {epsilon}")
    if model.n_parameters > 5000:
        raise ArgumentError(f"grad_check is limited to 5000 parameters, model has {model.n_parameters}")
    work = model.copy()
    patches, labels = batch.patches, batch.labels
    base, analytic = work.loss_and_gradients(patches, labels)
    noise = 64 * np.spacing(abs(base)) / epsilon

    worst = 0.0
    for param, grad in zip(work.parameters, analytic):
        flat = param.reshape(-1)
        for i, a in enumerate(grad.reshape(-1)):
            original = flat[i]
            flat[i] = original + epsilon
            plus = work.loss(patches, labels)
            flat[i] = original - epsilon
            minus = work.loss(patches, labels)
            flat[i] = original
            numeric = (plus - minus) / (2 * epsilon)
            diff = abs(a - numeric)
            if diff <= noise:
                continue
            worst = max(worst, diff / max(abs(a), abs(numeric), 1e-12))
    return worst


# Inference


class ConfidenceMap(BaseModel):
    """Per-pixel vessel probability; zero outside the ROI."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    roi: RoiMask
    scale_mm_per_px: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _clamp(cls, values):
        if isinstance(values, dict) and "values" in values and isinstance(values.get("roi"), RoiMask):
            arr = np.clip(np.array(values["values"], dtype=np.float64), 0.0, 1.0)
            if arr.shape != values["roi"].shape:
                raise ValueError(f"map shape {arr.shape} does not match ROI shape {values['roi'].shape}")
            arr[~values["roi"].included] = 0.0
            arr.flags.writeable = False
            values = {**values, "values": arr}
        return values

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def roi_values(self) -> np.ndarray:
        return self.values[self.roi.included]

    def as_image(self) -> GrayImage:
        return GrayImage(data=self.values, scale_mm_per_px=self.scale_mm_per_px)


def _check_fov(model: CnnModel, img: GrayImage) -> None:
    if model.scale_mm_per_px is None or img.scale_mm_per_px is None:
        return
    if not math.isclose(model.scale_mm_per_px, img.scale_mm_per_px, rel_tol=1e-9):
        raise FovMismatchError(
            f"model trained at {model.scale_mm_per_px:.6f} mm/px cannot segment an image at "
            f"{img.scale_mm_per_px:.6f} mm/px; a training set is needed for each field of view"
        )


def infer_map(model: CnnModel, img: GrayImage, roi: RoiMask, batch_size: int = 512) -> ConfidenceMap:
    """
    Vessel confidence for every ROI pixel from its mirror-padded patch.

    Patches are classified in batches; results match the per-pixel
    ``forward`` to within floating-point summation order.
    """
    if roi.shape != img.shape:
        raise ArgumentError(f"ROI shape {roi.shape} does not match image shape {img.shape}")
    _check_fov(model, img)
    k = model.patch_side
    windows = sliding_window_view(mirror_pad(img.data, k // 2), (k, k))
    coords = np.argwhere(roi.included)
    values = np.zeros(img.shape)
    for start in range(0, len(coords), batch_size):
        chunk = coords[start : start + batch_size]
        values[chunk[:, 0], chunk[:, 1]] = model.predict_proba(windows[chunk[:, 0], chunk[:, 1]])
    return ConfidenceMap(values=values, roi=roi, scale_mm_per_px=img.scale_mm_per_px)


def segment_image(model: CnnModel, img: GrayImage, roi: RoiMask, batch_size: int = 512) -> ConfidenceMap:
    """Apply the model's recorded preprocessing, then ``infer_map``."""
    return infer_map(model, preprocess(img, model.preprocessing), roi, batch_size)


# Split-half cross-validation


class Sample(BaseModel):
    """One eye of a training dataset."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    image_id: str
    image: GrayImage
    truth: BinaryMask


class CrossValidationResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    maps: dict[str, ConfidenceMap] = Field(description="One map per image, input order")
    models: tuple[CnnModel, CnnModel] = Field(description="Models trained on fold A and fold B")
    folds: tuple[tuple[str, ...], tuple[str, ...]]
    loss_traces: tuple[list[float], list[float]]
    inferred_by: dict[str, int] = Field(description="Index of the model that produced each map")


def _fold_patches(fold: Sequence[Sample], cfg: TrainConfig, fold_index: int) -> LabeledPatchSet:
    per_image = math.ceil(cfg.patches_per_class / len(fold))
    sets = []
    for position, sample in enumerate(fold):
        available = min(sample.truth.vessel_count, int(sample.truth.nonvessel.sum()))
        n = min(per_image, available)
        if n < 1:
            logger.warning(f"{sample.image_id}: no pixels of one class, skipped for training")
            continue
        sets.append(
            sample_balanced(
                sample.image,
                sample.truth,
                n,
                seed=(cfg.seed, fold_index, position),
                patch_side=cfg.patch_side,
                image_id=sample.image_id,
            )
        )
    if not sets:
        raise InsufficientClassPixelsError(f"fold {fold_index} has no trainable image")
    return LabeledPatchSet.concat(sets)


def split_half_cv(
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    preprocessing: Optional[PreprocessParams] = None,
    batch_size: int = 512,
) -> CrossValidationResult:
    """
    Train on the first ceil(n/2) images and segment the rest, then reverse.

    Args:
        dataset: Samples in a fixed order
        cfg: Training configuration
        preprocessing: Applied to every image before sampling and inference
        batch_size: Inference batch size

    Returns:
        CrossValidationResult with one map per image from the model that never saw it
    """
    if len(dataset) < 2:
        raise ArgumentError(f"split-half cross-validation needs >= 2 images, got {len(dataset)}")
    ids = [s.image_id for s in dataset]
    if len(set(ids)) != len(ids):
        raise ArgumentError("image ids must be unique")
    preprocessing = preprocessing or PreprocessParams(enabled=False)
    prepared = [
        Sample(image_id=s.image_id, image=preprocess(s.image, preprocessing), truth=s.truth) for s in dataset
    ]
    half = math.ceil(len(prepared) / 2)
    folds = (prepared[:half], prepared[half:])
    scale = dataset[0].image.scale_mm_per_px

    models = []
    traces = []
    for fold_index, fold in enumerate(folds):
        logger.info(f"Fold {'AB'[fold_index]}: training on {', '.join(s.image_id for s in fold)}")
        data = _fold_patches(fold, cfg, fold_index)
        start = CnnModel.named(
            cfg.architecture,
            seed=(cfg.seed, fold_index),
            patch_side=cfg.patch_side,
            preprocessing=preprocessing,
            scale_mm_per_px=scale,
        )
        start.seed = cfg.seed
        trained, trace = train(start, data, cfg)
        logger.info(f"Fold {'AB'[fold_index]}: final loss {trace[-1]:.4f} over {len(data)} patches")
        models.append(trained)
        traces.append(trace)

    maps: dict[str, ConfidenceMap] = {}
    inferred_by: dict[str, int] = {}
    for position, sample in enumerate(prepared):
        owner = 1 if position < half else 0
        maps[sample.image_id] = infer_map(models[owner], sample.image, sample.truth.roi, batch_size)
        inferred_by[sample.image_id] = owner
    return CrossValidationResult(
        maps=maps,
        models=(models[0], models[1]),
        folds=(tuple(s.image_id for s in folds[0]), tuple(s.image_id for s in folds[1])),
        loss_traces=(traces[0], traces[1]),
        inferred_by=inferred_by,
    )


# Persistence


def _header(model: CnnModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "architecture": model.name,
        "layers": model.descriptor,
        "patch_side": model.patch_side,
        "preprocessing": model.preprocessing.model_dump(),
        "seed": model.seed,
        "scale_mm_per_px": model.scale_mm_per_px,
    }


def save_model(model: CnnModel, path: Union[str, Path]) -> None:
    """Write magic, header length, JSON header, float64-LE weights, CRC-32 of the payload."""
    header = json.dumps(_header(model), sort_keys=True).encode("utf-8")
    weights = b"".join(p.astype("<f8").tobytes() for p in model.parameters)
    payload = struct.pack("<I", len(header)) + header + weights
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MODEL_MAGIC + payload + struct.pack("<I", zlib.crc32(payload)))
    logger.info(f"Saved model ({model.n_parameters} parameters) to {path}")


def load_model(path: Union[str, Path], expected_patch_side: Optional[int] = None) -> CnnModel:
    """
    Read a model file written by ``save_model``.

    Raises:
        ModelFormatError: bad magic, truncated file, unknown version
        ModelChecksumError: payload does not match its checksum
        ModelShapeError: layers do not chain, or patch side differs from the expected one
    """
    path = Path(path)
    if not path.is_file():
        raise ModelFormatError(f"model file not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MODEL_MAGIC):
        raise ModelFormatError(f"{path} is not a model file (bad magic)")
    body = raw[len(MODEL_MAGIC) :]
    if len(body) < 8:
        raise ModelFormatError(f"{path} is truncated")
    (header_len,) = struct.unpack("<I", body[:4])
    if len(body) < 4 + header_len + 4:
        raise ModelFormatError(f"{path} is truncated")
    payload, (checksum,) = body[:-4], struct.unpack("<I", body[-4:])
    if zlib.crc32(payload) != checksum:
        raise ModelChecksumError(f"{path}: checksum mismatch")
    try:
        header = json.loads(payload[4 : 4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"{path}: unreadable header: {e}") from e
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {header.get('format_version')}")

    patch_side = int(header["patch_side"])
    if expected_patch_side is not None and patch_side != expected_patch_side:
        raise ModelShapeError(f"{path}: patch side {patch_side}, expected {expected_patch_side}")
    model = CnnModel(
        header["layers"],
        patch_side,
        name=header.get("architecture", "custom"),
        preprocessing=PreprocessParams.model_validate(header["preprocessing"]),
        seed=int(header.get("seed", 0)),
        scale_mm_per_px=header.get("scale_mm_per_px"),
    )
    weights = np.frombuffer(payload[4 + header_len :], dtype="<f8")
    if weights.size != model.n_parameters:
        raise ModelShapeError(f"{path}: {weights.size} weights stored, architecture needs {model.n_parameters}")
    offset = 0
    for param in model.parameters:
        param[...] = weights[offset : offset + param.size].reshape(param.shape)
        offset += param.size
    return model
