"""Pydantic models shared by the CLI, the HTTP API and the CSV/report writers."""

from datetime import datetime
from enum import Enum
from typing import Literal, Optional
from uuid import UUID

from pydantic import BaseModel, Field

METRICS_COLUMNS = [
    "eye_id",
    "cohort",
    "rater",
    "area_mm2",
    "d_min_mm",
    "d_max_mm",
    "eccentricity",
    "density",
]

Rater = Literal["manual", "automated"]


class MetricsRow(BaseModel):
    """One eye's clinical outcome measures as written to the metrics CSV."""

    eye_id: str = Field(min_length=1, description="Eye identifier")
    cohort: str = Field(min_length=1, description="Cohort label, e.g. healthy or diabetic")
    rater: Rater = Field(description="manual tracing or automated segmentation")
    area_mm2: float = Field(ge=0, description="FAZ area in mm^2")
    d_min_mm: float = Field(gt=0, description="Minimum FAZ diameter in mm")
    d_max_mm: float = Field(gt=0, description="Maximum FAZ diameter in mm")
    eccentricity: float = Field(ge=0, lt=1, description="sqrt(1 - (d_min/d_max)^2)")
    density: float = Field(ge=0, le=1, description="Perifoveal vessel density")


class TaskStatus(str, Enum):
    """Status of a background task."""

    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class TaskProgress(BaseModel):
    """Progress information for a background task."""

    current_step: str = Field(description="Current step being executed")
    step_number: int = Field(description="Current step number")
    total_steps: int = Field(description="Total number of steps")
    details: Optional[str] = Field(default=None, description="Additional details")


class Task(BaseModel):
    """Background task tracking."""

    task_id: UUID = Field(description="Unique task identifier")
    status: TaskStatus = Field(description="Task status")
    task_type: str = Field(description="Type of task (synth, quantify, stats)")
    progress: Optional[TaskProgress] = Field(default=None, description="Task progress information")
    error: Optional[str] = Field(default=None, description="Error message if task failed")
    outputs: list[str] = Field(default_factory=list, description="Files written by the task")
    created_at: datetime = Field(
        default_factory=datetime.utcnow, description="Task creation timestamp"
    )
    started_at: Optional[datetime] = Field(default=None, description="Task start timestamp")
    completed_at: Optional[datetime] = Field(default=None, description="Task completion timestamp")


class SynthJobRequest(BaseModel):
    """Body of POST /api/v1/jobs/synth."""

    out_dir: str = Field(description="Directory receiving images, masks and the truth CSV")
    n_each: int = Field(default=4, ge=2, description="Eyes per cohort")
    preset: str = Field(default="prototype2mm300", description="Device scan preset")
    seed: int = Field(default=0, description="RNG seed")


class QuantifyJobRequest(BaseModel):
    """Body of POST /api/v1/jobs/quantify."""

    manifest: str = Field(description="Dataset manifest path")
    maps_dir: str = Field(description="Directory holding <eye_id>.pgm confidence maps")
    out_dir: str = Field(description="Output directory")
    config: Optional[str] = Field(default=None, description="Run config file")


class StatsJobRequest(BaseModel):
    """Body of POST /api/v1/jobs/stats."""

    metrics_csv: str = Field(description="Metrics CSV path")
    out_dir: str = Field(description="Output directory")


class JobResponse(BaseModel):
    """Response from job submission endpoints."""

    task_id: UUID = Field(description="Task ID for tracking progress")
    message: str = Field(description="Informational message")


class HealthResponse(BaseModel):
    """Health check response."""

    status: str = Field(default="healthy", description="API health status")
    timestamp: datetime = Field(
        default_factory=datetime.utcnow, description="Health check timestamp"
    )
