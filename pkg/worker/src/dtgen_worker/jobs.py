"""Background job execution with wire-shaped status documents.

Jobs run on daemon threads.  Fine-tune jobs serialize on a dedicated gate so
only one trains at a time; other kinds run as they arrive.  Submitting an
already-known job id returns the current state instead of starting a second
run, so resubmission after a dropped connection is safe.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable

from dtgen.backend_gateway import CONTRACT_VERSION

logger = logging.getLogger(__name__)

__all__ = ["Job", "JobRegistry"]

_RESULT_FIELDS = ("adapter_id", "artifact_ref", "predictions_ref", "train_accuracy")


@dataclass
class Job:
    job_id: str
    kind: str
    status: str = "queued"
    adapter_id: str | None = None
    artifact_ref: str | None = None
    predictions_ref: str | None = None
    train_accuracy: float | None = None
    error: str | None = None

    def to_wire(self) -> dict[str, Any]:
        return {
            "contract": CONTRACT_VERSION,
            "job_id": self.job_id,
            "status": self.status,
            "adapter_id": self.adapter_id,
            "artifact_ref": self.artifact_ref,
            "predictions_ref": self.predictions_ref,
            "train_accuracy": self.train_accuracy,
            "error": self.error,
        }


class JobRegistry:
    """Tracks jobs and runs them; at most one fine-tune is in flight."""

    def __init__(self) -> None:
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()
        self._finetune_gate = threading.Lock()

    def get_wire(self, job_id: str) -> dict[str, Any] | None:
        with self._lock:
            job = self._jobs.get(job_id)
            return job.to_wire() if job else None

    def submit(self, job_id: str, kind: str, runner: Callable[[], dict[str, Any]]) -> dict[str, Any]:
        """Start (or find) a job; returns its wire document."""
        with self._lock:
            existing = self._jobs.get(job_id)
            if existing is not None:
                return existing.to_wire()
            job = Job(job_id=job_id, kind=kind)
            self._jobs[job_id] = job
        thread = threading.Thread(
            target=self._execute, args=(job, runner), daemon=True, name=f"job-{job_id}"
        )
        thread.start()
        with self._lock:
            return job.to_wire()

    def _execute(self, job: Job, runner: Callable[[], dict[str, Any]]) -> None:
        gate = self._finetune_gate if job.kind == "finetune" else None
        if gate is not None:
            gate.acquire()
        try:
            with self._lock:
                job.status = "running"
            result = runner()
            with self._lock:
                for field in _RESULT_FIELDS:
                    if field in result:
                        setattr(job, field, result[field])
                job.status = "done"
        except Exception as exc:
            logger.exception("job %s failed", job.job_id)
            with self._lock:
                job.error = str(exc) or type(exc).__name__
                job.status = "failed"
        finally:
            if gate is not None:
                gate.release()
