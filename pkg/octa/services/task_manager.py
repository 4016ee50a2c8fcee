"""Task manager for tracking and executing background pipeline jobs."""

import asyncio
import logging
from datetime import datetime
from pathlib import Path
from typing import Optional
from uuid import UUID, uuid4

from octa.config import RunConfig
from octa.models import Task, TaskProgress, TaskStatus
from octa.services.pipeline import PipelineService, RunOutcome

logger = logging.getLogger(__name__)


class TaskManager:
    """Manager for background task execution and tracking."""

    def __init__(self):
        """Initialize task manager with in-memory task store."""
        self.tasks: dict[UUID, Task] = {}

    def create_task(self, task_type: str) -> Task:
        """
        Create a new task.

        Args:
            task_type: Type of task (synth, quantify, stats)

        Returns:
            Created task object
        """
        task_id = uuid4()
        task = Task(task_id=task_id, status=TaskStatus.PENDING, task_type=task_type)
        self.tasks[task_id] = task
        logger.info(f"Created task {task_id} ({task_type})")
        return task

    def get_task(self, task_id: UUID) -> Optional[Task]:
        return self.tasks.get(task_id)

    def update_task_progress(
        self,
        task_id: UUID,
        step: str,
        step_number: int,
        total_steps: int,
        details: Optional[str] = None,
    ) -> None:
        task = self.tasks.get(task_id)
        if task:
            task.progress = TaskProgress(
                current_step=step,
                step_number=step_number,
                total_steps=total_steps,
                details=details,
            )
            logger.debug(f"Task {task_id} progress: {step} ({step_number}/{total_steps})")

    def mark_task_running(self, task_id: UUID) -> None:
        task = self.tasks.get(task_id)
        if task:
            task.status = TaskStatus.RUNNING
            task.started_at = datetime.utcnow()
            logger.info(f"Task {task_id} started")

    def mark_task_completed(self, task_id: UUID, outcome: Optional[RunOutcome] = None) -> None:
        """Mark task as completed, recording its outputs and any excluded eyes."""
        task = self.tasks.get(task_id)
        if task:
            task.status = TaskStatus.COMPLETED
            task.completed_at = datetime.utcnow()
            if outcome is not None:
                task.outputs = list(outcome.outputs)
                if outcome.partial:
                    task.error = f"{len(outcome.failures)} eyes excluded, see exceptions.log"
            logger.info(f"Task {task_id} completed")

    def mark_task_failed(self, task_id: UUID, error: str) -> None:
        task = self.tasks.get(task_id)
        if task:
            task.status = TaskStatus.FAILED
            task.completed_at = datetime.utcnow()
            task.error = error
            logger.error(f"Task {task_id} failed: {error}")

    async def run_synth_sequence(self, task_id: UUID, out_dir: str, n_each: int, preset: str, seed: int) -> None:
        """Generate a synthetic healthy/diabetic cohort in the background."""
        try:
            self.mark_task_running(task_id)

            # Step 1: Resolve configuration
            self.update_task_progress(task_id, "Resolving configuration", 1, 2)
            config = RunConfig(preset=preset, seed=seed, out_dir=out_dir)

            # Step 2: Generate cohort
            self.update_task_progress(task_id, "Generating synthetic cohort", 2, 2, f"{2 * n_each} eyes")
            outcome = await asyncio.to_thread(PipelineService(config).synth, n_each, seed)

            self.mark_task_completed(task_id, outcome)

        except Exception as e:
            logger.exception(f"Unexpected error in synth sequence: {e}")
            self.mark_task_failed(task_id, f"Unexpected error: {str(e)}")

    async def run_quantify_sequence(
        self, task_id: UUID, manifest: str, maps_dir: str, out_dir: str, config: Optional[str] = None
    ) -> None:
        """Quantify every manifest eye from its confidence map, then summarise the cohorts."""
        try:
            self.mark_task_running(task_id)

            # Step 1: Load configuration
            self.update_task_progress(task_id, "Loading run configuration", 1, 3)
            run_config = RunConfig.from_file(config, out_dir=out_dir)
            pipeline = PipelineService(run_config)

            # Step 2: Quantify eyes
            self.update_task_progress(task_id, "Quantifying eyes", 2, 3)
            outcome = await asyncio.to_thread(pipeline.quantify, manifest, maps_dir)

            # Step 3: Cohort statistics
            self.update_task_progress(task_id, "Computing cohort statistics", 3, 3)
            report = await asyncio.to_thread(pipeline.stats, Path(out_dir) / "metrics.csv")
            outcome.outputs += report.outputs

            self.mark_task_completed(task_id, outcome)

        except Exception as e:
            logger.exception(f"Unexpected error in quantify sequence: {e}")
            self.mark_task_failed(task_id, f"Unexpected error: {str(e)}")

    async def run_stats_sequence(self, task_id: UUID, metrics_csv: str, out_dir: str) -> None:
        """Build the cohort report from a metrics CSV."""
        try:
            self.mark_task_running(task_id)

            # Step 1: Cohort statistics
            self.update_task_progress(task_id, "Computing cohort statistics", 1, 1)
            outcome = await asyncio.to_thread(PipelineService(out_dir=out_dir).stats, metrics_csv)

            self.mark_task_completed(task_id, outcome)

        except Exception as e:
            logger.exception(f"Unexpected error in stats sequence: {e}")
            self.mark_task_failed(task_id, f"Unexpected error: {str(e)}")


# Global task manager instance
task_manager = TaskManager()
