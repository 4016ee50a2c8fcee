"""Prometheus counters for pipeline progress."""

from prometheus_client import Counter

EYES_PROCESSED = Counter(
    "octa_eyes_processed",
    "Eyes that completed a pipeline stage",
    ["stage"],
)
EYE_FAILURES = Counter(
    "octa_eye_failures",
    "Eyes excluded from a pipeline stage by a per-eye error",
    ["stage"],
)
TRAINING_EPOCHS = Counter(
    "octa_training_epochs",
    "Training epochs completed across all folds",
)
