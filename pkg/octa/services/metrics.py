"""Pixel-wise agreement between automated and manual vessel masks."""

import logging
from collections.abc import Sequence
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from octa.exceptions import ArgumentError, UndefinedRateError
from octa.utils.raster import BinaryMask

logger = logging.getLogger(__name__)

AGREEMENT_COLUMNS = [
    "eye_id",
    "group",
    "tp",
    "fp",
    "tn",
    "fn",
    "accuracy",
    "sensitivity",
    "specificity",
    "dice_extra",
]


class ConfusionCounts(BaseModel):
    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    tn: int = Field(ge=0)
    fn: int = Field(ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            tn=self.tn + other.tn,
            fn=self.fn + other.fn,
        )


class Rates(BaseModel):
    accuracy: float = Field(ge=0, le=1)
    sensitivity: float = Field(ge=0, le=1)
    specificity: float = Field(ge=0, le=1)


def confusion(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    """Confusion counts over the shared ROI (vessel is the positive class)."""
    if pred.shape != gt.shape:
        raise ArgumentError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not np.array_equal(pred.roi.included, gt.roi.included):
        raise ArgumentError("masks must share the same ROI")
    roi = gt.roi.included
    p, g = pred.vessel, gt.vessel
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        tn=int(np.count_nonzero(~p & ~g & roi)),
        fn=int(np.count_nonzero(~p & g)),
    )


def rates(c: ConfusionCounts) -> Rates:
    """
    Accuracy, sensitivity and specificity.

    Raises:
        UndefinedRateError: a rate's denominator is zero
    """
    if c.total == 0:
        raise UndefinedRateError("accuracy")
    if c.tp + c.fn == 0:
        raise UndefinedRateError("sensitivity")
    if c.tn + c.fp == 0:
        raise UndefinedRateError("specificity")
    return Rates(
        accuracy=(c.tp + c.tn) / c.total,
        sensitivity=c.tp / (c.tp + c.fn),
        specificity=c.tn / (c.tn + c.fp),
    )


def dice(c: ConfusionCounts) -> float:
    """Dice overlap 2TP / (2TP + FP + FN); exported as an extra column."""
    denominator = 2 * c.tp + c.fp + c.fn
    if denominator == 0:
        raise UndefinedRateError("dice")
    return 2 * c.tp / denominator


def dataset_rates(
    pairs: Sequence[tuple[BinaryMask, BinaryMask]],
    groups: Sequence[str],
    pooled: bool = False,
    expected_groups: Optional[Sequence[str]] = None,
) -> dict[str, Rates]:
    """
    Mean rates per group.

    Args:
        pairs: (prediction, manual) masks
        groups: Group label of each pair (e.g. ``optovue/healthy``)
        pooled: Sum counts per group before computing rates instead of
            averaging per-image rates
        expected_groups: Groups that must each have at least one pair

    Returns:
        Group label -> Rates, sorted by label
    """
    if len(pairs) != len(groups):
        raise ArgumentError(f"{len(pairs)} pairs but {len(groups)} group labels")
    counts: dict[str, list[ConfusionCounts]] = {}
    for (pred, gt), group in zip(pairs, groups):
        counts.setdefault(group, []).append(confusion(pred, gt))
    for group in expected_groups or []:
        if group not in counts:
            raise ArgumentError(f"group {group!r} has no image pairs")
    if not counts:
        raise ArgumentError("no image pairs given")

    result = {}
    for group in sorted(counts):
        members = counts[group]
        if pooled:
            total = members[0]
            for c in members[1:]:
                total = total + c
            result[group] = rates(total)
        else:
            per_image = [rates(c) for c in members]
            result[group] = Rates(
                accuracy=float(np.mean([r.accuracy for r in per_image])),
                sensitivity=float(np.mean([r.sensitivity for r in per_image])),
                specificity=float(np.mean([r.specificity for r in per_image])),
            )
    return result


class AgreementRow(BaseModel):
    eye_id: str
    group: str
    counts: ConfusionCounts


def agreement_frame(rows: Sequence[AgreementRow]) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-image counts and rates, plus per-group means; both sorted for stable output."""
    records = []
    for row in rows:
        r = rates(row.counts)
        records.append(
            {
                "eye_id": row.eye_id,
                "group": row.group,
                **row.counts.model_dump(),
                **r.model_dump(),
                "dice_extra": dice(row.counts),
            }
        )
    per_image = pd.DataFrame.from_records(records, columns=AGREEMENT_COLUMNS)
    per_image = per_image.sort_values(["group", "eye_id"], kind="mergesort").reset_index(drop=True)
    summary = (
        per_image.groupby("group", sort=True)[["accuracy", "sensitivity", "specificity", "dice_extra"]]
        .mean()
        .reset_index()
    )
    summary.insert(1, "n", per_image.groupby("group", sort=True).size().to_numpy())
    return per_image, summary
