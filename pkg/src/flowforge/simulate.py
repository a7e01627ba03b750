"""Deterministic discrete-event simulation of scaled-out execution.

Stands in for a real cluster at desk scale: each worker processes one
message at a time, task duration = service_time / speed_factor of the
step's resource class. Produces the same event and metric records as real
execution, flagged ``simulated: true``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .errors import SpecInvalid
from .model import WorkflowSpec
from .provenance import MetricRecord, ProvenanceStore
from .resources import ResourceClass
from .tasks import TaskRun, TaskState

ServiceTimes = "dict[str, float | list[float]]"


@dataclass
class SimulationResult:
    run_id: str
    makespan_s: float
    task_runs: list[TaskRun] = field(default_factory=list)

    @property
    def tasks_per_step(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for t in self.task_runs:
            out[t.step_id] = out.get(t.step_id, 0) + 1
        return out


def _service(per_item, step_id: str, k: int) -> float:
    v = per_item[step_id]
    if isinstance(v, (int, float)):
        return float(v)
    return float(v[k % len(v)])


def simulate_cluster(spec: WorkflowSpec, worker_counts: dict[str, int],
                     rc_map: dict[str, ResourceClass],
                     per_item_service_times: dict,
                     n_messages: int,
                     store: ProvenanceStore | None = None,
                     run_id: str = "sim") -> SimulationResult:
    """Simulate a run of ``n_messages`` source messages through the DAG.

    ``per_item_service_times`` maps step id to a scalar service time or a
    per-item list (indexed by the step's task start order, cyclically).
    """
    step_ids = [s.id for s in spec.steps]
    for sid in step_ids:
        if sid not in per_item_service_times:
            raise SpecInvalid(f"no service time for step {sid}")
        v = per_item_service_times[sid]
        vals = [v] if isinstance(v, (int, float)) else list(v)
        if not vals or any(x <= 0 for x in vals):
            raise SpecInvalid(f"service times for {sid} must be positive")
    if n_messages < 0:
        raise SpecInvalid("n_messages must be >= 0")

    consumers: dict[str, list[str]] = {sid: [] for sid in step_ids}
    for c in spec.channels:
        consumers[c.producer].append(c.consumer)
    for sid in consumers:
        consumers[sid].sort()

    workers = {sid: max(1, worker_counts.get(sid, 1)) for sid in step_ids}
    speed = {sid: (rc_map[sid].speed_factor if sid in rc_map else 1.0) for sid in step_ids}

    pending: dict[str, list[tuple[float, int]]] = {sid: [] for sid in step_ids}  # heapified (arrival, seq)
    busy = {sid: 0 for sid in step_ids}
    started = {sid: 0 for sid in step_ids}

    result = SimulationResult(run_id=run_id, makespan_s=0.0)
    events: list[tuple[float, int, str, str]] = []  # (time, seq, kind, step)
    seq = 0

    def emit_event(kind: str, body: dict, at_s: float):
        if store is not None:
            store.append_event(run_id, kind, {**body, "simulated": True}, at=int(at_s * 1000))

    def start_task(sid: str, arrival_s: float, now_s: float):
        nonlocal seq
        k = started[sid]
        started[sid] += 1
        busy[sid] += 1
        dur = _service(per_item_service_times, sid, k) / speed[sid]
        end = now_s + dur
        task = TaskRun(run_id=run_id, workflow_id=spec.id, workflow_version=spec.version,
                       step_id=sid, msg_id=f"sim-{sid}-{k}", attempt=1,
                       resource_class=(rc_map[sid].id if sid in rc_map else "sim"))
        task.transition(TaskState.SCHEDULED, at=int(arrival_s * 1000))
        task.transition(TaskState.RUNNING, at=int(now_s * 1000))
        task.transition(TaskState.SUCCEEDED, at=int(end * 1000), exit_code=0)
        result.task_runs.append(task)
        emit_event("TaskStateChanged", task.to_dict(), end)
        if store is not None:
            store.append_metric(MetricRecord(
                run_id=run_id, step_id=sid, attempt=1, metric="runtime_s", value=dur,
                unit="s", recorded_at=int(end * 1000), msg_id=task.msg_id,
                resource_class=task.resource_class, simulated=True))
        seq += 1
        heapq.heappush(events, (end, seq, "finish", sid))

    emit_event("RunStarted", {"run_id": run_id, "workflow_id": spec.id,
                              "mode": "scaled", "worker_counts": dict(workers),
                              "source_count": n_messages}, 0.0)

    for sid in sorted(spec.source_steps()):
        for _ in range(n_messages):
            seq += 1
            heapq.heappush(events, (0.0, seq, "arrive", sid))

    arrival_seq = 0
    while events:
        now_s, esq, kind, sid = heapq.heappop(events)
        result.makespan_s = max(result.makespan_s, now_s)
        if kind == "arrive":
            arrival_seq += 1
            if busy[sid] < workers[sid]:
                start_task(sid, now_s, now_s)
            else:
                heapq.heappush(pending[sid], (now_s, arrival_seq))
        else:  # finish
            busy[sid] -= 1
            for consumer in consumers[sid]:
                seq += 1
                heapq.heappush(events, (now_s, seq, "arrive", consumer))
            if pending[sid] and busy[sid] < workers[sid]:
                arrival_s, _ = heapq.heappop(pending[sid])
                start_task(sid, arrival_s, now_s)

    emit_event("RunCompleted", {"run_id": run_id, "status": "Completed",
                                "makespan_s": result.makespan_s,
                                "task_counts": result.tasks_per_step}, result.makespan_s)
    return result
