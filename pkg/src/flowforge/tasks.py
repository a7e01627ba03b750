"""Task and run lifecycle types shared by the executor and its clients."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

from .errors import InvalidTransition


class TaskState(str, Enum):
    PENDING = "Pending"
    SCHEDULED = "Scheduled"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    CANCELLED = "Cancelled"
    TIMED_OUT = "TimedOut"


_ALLOWED = {
    TaskState.PENDING: {TaskState.SCHEDULED},
    TaskState.SCHEDULED: {TaskState.RUNNING},
    TaskState.RUNNING: {TaskState.SUCCEEDED, TaskState.FAILED,
                        TaskState.CANCELLED, TaskState.TIMED_OUT},
    TaskState.SUCCEEDED: set(),
    TaskState.FAILED: set(),
    TaskState.CANCELLED: set(),
    TaskState.TIMED_OUT: set(),
}

TERMINAL_TASK_STATES = frozenset(
    (TaskState.SUCCEEDED, TaskState.FAILED, TaskState.CANCELLED, TaskState.TIMED_OUT))


@dataclass
class TaskRun:
    run_id: str
    workflow_id: str
    workflow_version: int
    step_id: str
    msg_id: str
    attempt: int
    resource_class: str
    state: TaskState = TaskState.PENDING
    started_at: int | None = None
    ended_at: int | None = None
    exit_code: int | None = None
    error: str | None = None

    def transition(self, new_state: TaskState, at: int | None = None, exit_code: int | None = None):
        if new_state not in _ALLOWED[self.state]:
            raise InvalidTransition(f"task {self.step_id}/{self.msg_id}: {self.state.value} -> {new_state.value}")
        if new_state == TaskState.SUCCEEDED and exit_code != 0:
            raise InvalidTransition("Succeeded requires exit_code 0")
        self.state = new_state
        if new_state == TaskState.RUNNING and at is not None:
            self.started_at = at
        if new_state in TERMINAL_TASK_STATES:
            self.ended_at = at
            self.exit_code = exit_code

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id, "workflow_id": self.workflow_id,
            "workflow_version": self.workflow_version, "step_id": self.step_id,
            "msg_id": self.msg_id, "attempt": self.attempt,
            "resource_class": self.resource_class, "state": self.state.value,
            "started_at": self.started_at, "ended_at": self.ended_at,
            "exit_code": self.exit_code, "error": self.error,
        }


class RunStatus(str, Enum):
    RUNNING = "Running"
    PAUSED = "Paused"
    COMPLETED = "Completed"
    FAILED = "Failed"
    CANCELLED = "Cancelled"


TERMINAL_RUN_STATUSES = frozenset((RunStatus.COMPLETED, RunStatus.FAILED, RunStatus.CANCELLED))


@dataclass
class RunHandle:
    run_id: str
    workflow_id: str
    workflow_version: int
    mode: str  # "exploratory" | "scaled"
    worker_counts: dict[str, int] = field(default_factory=dict)
    status: RunStatus = RunStatus.RUNNING
    created_at: int = 0

    def snapshot(self) -> "RunHandle":
        return replace(self, worker_counts=dict(self.worker_counts))

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id, "workflow_id": self.workflow_id,
            "workflow_version": self.workflow_version, "mode": self.mode,
            "worker_counts": dict(self.worker_counts), "status": self.status.value,
            "created_at": self.created_at,
        }
