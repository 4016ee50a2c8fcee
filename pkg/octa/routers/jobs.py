"""Job endpoints for running pipeline stages in the background."""

import logging
from uuid import UUID

from fastapi import APIRouter, BackgroundTasks, HTTPException

from octa.models import JobResponse, QuantifyJobRequest, StatsJobRequest, SynthJobRequest, Task
from octa.services.task_manager import task_manager

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/v1/jobs", tags=["jobs"])


@router.post("/synth", response_model=JobResponse)
async def start_synth(request: SynthJobRequest, background_tasks: BackgroundTasks) -> JobResponse:
    """
    Generate a synthetic healthy/diabetic cohort.

    Writes images, truth masks, sidecars, a manifest and the truth CSV
    under ``out_dir``.

    Returns:
        JobResponse with task ID for progress tracking
    """
    logger.info(f"Synth request received ({request.preset}, {request.n_each} eyes per cohort)")

    task = task_manager.create_task("synth")
    background_tasks.add_task(
        task_manager.run_synth_sequence,
        task.task_id,
        request.out_dir,
        request.n_each,
        request.preset,
        request.seed,
    )

    return JobResponse(
        task_id=task.task_id,
        message="Synthetic cohort generation started. Use the task ID to check progress.",
    )


@router.post("/quantify", response_model=JobResponse)
async def start_quantify(request: QuantifyJobRequest, background_tasks: BackgroundTasks) -> JobResponse:
    """
    Quantify every manifest eye from its confidence map and build the cohort report.

    Returns:
        JobResponse with task ID for progress tracking
    """
    logger.info(f"Quantify request received for {request.manifest}")

    task = task_manager.create_task("quantify")
    background_tasks.add_task(
        task_manager.run_quantify_sequence,
        task.task_id,
        request.manifest,
        request.maps_dir,
        request.out_dir,
        request.config,
    )

    return JobResponse(
        task_id=task.task_id,
        message="Quantification started. Use the task ID to check progress.",
    )


@router.post("/stats", response_model=JobResponse)
async def start_stats(request: StatsJobRequest, background_tasks: BackgroundTasks) -> JobResponse:
    """Cohort report from a metrics CSV."""
    logger.info(f"Stats request received for {request.metrics_csv}")

    task = task_manager.create_task("stats")
    background_tasks.add_task(
        task_manager.run_stats_sequence, task.task_id, request.metrics_csv, request.out_dir
    )

    return JobResponse(task_id=task.task_id, message="Cohort statistics started.")


@router.get("/{task_id}", response_model=Task)
async def get_task_status(task_id: UUID) -> Task:
    """
    Get status of a background job.

    Args:
        task_id: Task UUID returned from a job submission endpoint

    Returns:
        Task object with current status and progress

    Raises:
        HTTPException: If task ID not found
    """
    task = task_manager.get_task(task_id)
    if not task:
        raise HTTPException(
            status_code=404,
            detail=f"Task {task_id} not found",
        )

    return task
