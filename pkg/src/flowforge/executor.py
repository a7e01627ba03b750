"""Runs workflows as worker pools over broker queues.

Exploratory mode forces one worker per step with full metric capture;
scaled mode runs N workers per step against the same queues, so the same
workflow scales out without refactoring. Queue names are namespaced per run
(``<run_id>.<channel>``); source steps read from an implicit
``<run_id>._source.<step>`` queue and sink steps write to
``<run_id>._sink.<step>``, whose contents become the run's results.

All shared state lives behind one engine lock; callers get snapshots.
Workers publish a task's outputs before acking its input, so a run is
quiescent exactly when every run queue reports (0, 0).
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field

import psutil

from . import adapters, config
from .adapters import SINK_CHANNEL, StepContext, run_step
from .broker import Broker, Message
from .errors import (GateBlocked, InvalidTransition, QueueFull, ResourceClassUnknown,
                     SpecInvalid, UnknownMessage, UnknownQueue, UnknownRun, UnknownStep)
from .model import StepSpec, WorkflowSpec, substitute_params, validate_dag
from .provenance import MetricRecord, ProvenanceStore, TrailSample, now_ms
from .resources import Catalog, ResourceClass
from .tasks import RunHandle, RunStatus, TaskRun, TaskState, TERMINAL_RUN_STATUSES

MODES = ("exploratory", "scaled")


@dataclass
class _ActiveTask:
    task: TaskRun
    step: StepSpec
    input_queues: tuple[str, ...]
    pid: int | None = None
    proc_handle: object = None
    max_rss_mb: float = 0.0


class _StepPool:
    def __init__(self, step: StepSpec, input_queues: tuple[str, ...], targets: dict[str, str]):
        self.step = step
        self.input_queues = input_queues
        self.targets = targets  # channel id (or _sink) -> broker queue name
        self.target_size = 1
        self.threads: dict[int, threading.Thread] = {}
        self.rotate = 0


class _RunState:
    def __init__(self, handle: RunHandle, spec: WorkflowSpec):
        self.handle = handle
        self.spec = spec
        self.pools: dict[str, _StepPool] = {}
        self.tasks: list[TaskRun] = []
        self.active: dict[tuple[str, str, int], _ActiveTask] = {}
        self.results: list[bytes] = []
        self.paused = threading.Event()   # set while paused
        self.cancelled = threading.Event()
        self.done = threading.Event()
        self.monitor: threading.Thread | None = None
        self.queues: list[str] = []       # source + channel queues (quiescence set)
        self.sink_queues: list[str] = []

    @property
    def finished(self) -> bool:
        return self.handle.status in TERMINAL_RUN_STATUSES


class Engine:
    """Owns worker pools and the run/task registries ("state keeper")."""

    def __init__(self, broker: Broker, store: ProvenanceStore,
                 catalog: Catalog | None = None, *,
                 broker_addr: str = "", poll_interval_s: float = 0.004,
                 lease_slack_s: float = 30.0, max_workers: int = config.MAX_WORKERS,
                 trail_period_ms: int | None = None, record_trail: bool = True,
                 gate_checker=None):
        self.broker = broker
        self.store = store
        self.catalog = catalog or Catalog()
        self.broker_addr = broker_addr
        self.poll_interval_s = poll_interval_s
        self.lease_slack_s = lease_slack_s
        self.max_workers = max_workers
        self.gate_checker = gate_checker
        self.record_trail = record_trail
        self.trail_period_ms = trail_period_ms if trail_period_ms is not None else config.trail_period_ms()
        self._lock = threading.RLock()
        self._runs: dict[str, _RunState] = {}
        self._trail_thread: threading.Thread | None = None
        self._shutdown = threading.Event()

    # -- helpers ----------------------------------------------------------------

    @staticmethod
    def _qname(run_id: str, channel_id: str) -> str:
        return f"{run_id}.{channel_id}"

    def _resource_class_for(self, spec: WorkflowSpec, step: StepSpec) -> ResourceClass:
        rc_id = step.resource_request or spec.default_resource_class
        rc = self.catalog.get(rc_id)
        if rc is None:
            raise ResourceClassUnknown(rc_id)
        return rc

    def _emit(self, run_id: str, kind: str, body: dict):
        self.store.append_event(run_id, kind, body)

    # -- start_run ---------------------------------------------------------------

    def start_run(self, spec: WorkflowSpec, mode: str = "exploratory",
                  worker_counts: dict[str, int] | None = None,
                  source_messages: list[bytes] | tuple[bytes, ...] = (),
                  params: dict | None = None, actor: str = "system",
                  override_gate: bool = False) -> RunHandle:
        if mode not in MODES:
            raise SpecInvalid(f"unknown mode: {mode}")
        report = validate_dag(spec, builtins=adapters.builtin_names())
        if not report.ok:
            raise SpecInvalid("; ".join(report.violations))
        worker_counts = dict(worker_counts or {})
        step_ids = {s.id for s in spec.steps}
        unknown = set(worker_counts) - step_ids
        if unknown:
            raise SpecInvalid(f"worker_counts for unknown steps: {sorted(unknown)}")
        for sid, n in worker_counts.items():
            if not isinstance(n, int) or n < 1 or n > self.max_workers:
                raise SpecInvalid(f"worker count for {sid} out of range: {n}")
        if mode == "exploratory" and any(n != 1 for n in worker_counts.values()):
            raise SpecInvalid("exploratory mode requires worker_counts of 1")
        for s in spec.steps:
            self._resource_class_for(spec, s)
        if params:
            spec = substitute_params(spec, params)

        gate_override_event = None
        if mode == "scaled" and self.gate_checker is not None:
            gate = self.gate_checker(spec.id)
            if gate is not None and not gate.get("ready", False):
                if not override_gate:
                    raise GateBlocked(f"workflow {spec.id} is not scale-ready", report=gate)
                gate_override_event = gate

        run_id = "r-" + uuid.uuid4().hex[:12]
        counts = {s.id: worker_counts.get(s.id, 1) for s in spec.steps}
        handle = RunHandle(run_id=run_id, workflow_id=spec.id, workflow_version=spec.version,
                           mode=mode, worker_counts=counts, status=RunStatus.RUNNING,
                           created_at=now_ms())
        rs = _RunState(handle, spec)

        try:
            for c in spec.channels:
                consumer = spec.step(c.consumer)
                self.broker.declare_queue(self._qname(run_id, c.id), capacity=c.capacity,
                                          max_attempts=consumer.max_attempts)
                rs.queues.append(self._qname(run_id, c.id))
            for sid in spec.source_steps():
                step = spec.step(sid)
                q = self._qname(run_id, f"_source.{sid}")
                self.broker.declare_queue(q, capacity=max(1024, len(source_messages)),
                                          max_attempts=step.max_attempts)
                rs.queues.append(q)
            for sid in spec.sink_steps():
                q = self._qname(run_id, f"_sink.{sid}")
                self.broker.declare_queue(q, capacity=2**62)
                rs.sink_queues.append(q)
            for sid in spec.source_steps():
                q = self._qname(run_id, f"_source.{sid}")
                for payload in source_messages:
                    self.broker.publish(q, payload, headers={"run_id": run_id, "producer_step": "_seed"})
        except (OSError, ConnectionError) as e:
            from .errors import BrokerUnavailable
            raise BrokerUnavailable(str(e)) from e

        with self._lock:
            self._runs[run_id] = rs

        self._emit(run_id, "RunStarted", {
            "run_id": run_id, "workflow_id": spec.id, "workflow_version": spec.version,
            "mode": mode, "worker_counts": counts, "source_count": len(source_messages),
            "actor": actor,
        })
        if gate_override_event is not None:
            self._emit(run_id, "SteeringEvent", {
                "action": "override_gate", "actor": actor, "gate": gate_override_event,
            })

        for s in spec.steps:
            input_queues = tuple(self._qname(run_id, cid) for cid in s.inputs) \
                or (self._qname(run_id, f"_source.{s.id}"),)
            targets = {cid: self._qname(run_id, cid) for cid in s.outputs}
            if not s.outputs:
                targets[SINK_CHANNEL] = self._qname(run_id, f"_sink.{s.id}")
            pool = _StepPool(s, input_queues, targets)
            pool.target_size = counts[s.id]
            rs.pools[s.id] = pool
            self._resize_pool(rs, pool)

        rs.monitor = threading.Thread(target=self._monitor_run, args=(rs,), daemon=True,
                                      name=f"monitor-{run_id}")
        rs.monitor.start()
        self._ensure_trail_thread()
        return handle.snapshot()

    # -- worker pool --------------------------------------------------------------

    def _resize_pool(self, rs: _RunState, pool: _StepPool):
        for idx in range(pool.target_size):
            t = pool.threads.get(idx)
            if t is None or not t.is_alive():
                t = threading.Thread(target=self._worker, args=(rs, pool, idx), daemon=True,
                                     name=f"{rs.handle.run_id}-{pool.step.id}-{idx}")
                pool.threads[idx] = t
                t.start()

    def _worker(self, rs: _RunState, pool: _StepPool, idx: int):
        step = pool.step
        lease_s = step.timeout_s + self.lease_slack_s
        while True:
            if idx >= pool.target_size or rs.cancelled.is_set() or rs.finished:
                return
            if rs.paused.is_set():
                time.sleep(self.poll_interval_s)
                continue
            msg = None
            nq = len(pool.input_queues)
            for i in range(nq):
                q = pool.input_queues[(pool.rotate + i) % nq]
                try:
                    msg = self.broker.consume(q, lease_s=lease_s)
                except UnknownQueue:
                    msg = None
                if msg is not None:
                    pool.rotate = (pool.rotate + i + 1) % nq
                    break
            if msg is None:
                time.sleep(self.poll_interval_s)
                continue
            self._execute_and_settle(rs, pool, msg)

    def _execute_and_settle(self, rs: _RunState, pool: _StepPool, msg: Message):
        step = pool.step
        run_id = rs.handle.run_id
        rc = self._resource_class_for(rs.spec, step)
        task = TaskRun(run_id=run_id, workflow_id=rs.spec.id, workflow_version=rs.spec.version,
                       step_id=step.id, msg_id=msg.msg_id, attempt=msg.attempt,
                       resource_class=rc.id)
        key = (step.id, msg.msg_id, msg.attempt)
        active = _ActiveTask(task=task, step=step, input_queues=pool.input_queues)
        with self._lock:
            rs.tasks.append(task)
            rs.active[key] = active
        self._task_event(rs, task)
        queue_wait_s = max(0.0, (now_ms() - msg.enqueued_at) / 1000.0)

        try:
            task.transition(TaskState.SCHEDULED, at=now_ms())
            self._task_event(rs, task)
            task.transition(TaskState.RUNNING, at=now_ms())
            self._task_event(rs, task)

            ctx = StepContext(run_id=run_id, step_id=step.id, attempt=msg.attempt,
                              broker_addr=self.broker_addr)
            ctx.on_spawn = lambda pid: self._register_pid(active, pid)
            outcome = run_step(step, msg.payload, ctx)

            if outcome.ok:
                for channel, payload in outcome.outputs:
                    qname = pool.targets.get(channel)
                    if qname is None:
                        continue
                    self._publish_with_backpressure(rs, qname, payload, run_id, step.id)
                try:
                    self.broker.ack(msg.msg_id)
                except UnknownMessage:
                    pass  # lease expired mid-flight; redelivery will supersede us
                task.transition(TaskState.SUCCEEDED, at=now_ms(), exit_code=0)
            elif outcome.timed_out:
                try:
                    self.broker.nack(msg.msg_id, requeue=True)
                except UnknownMessage:
                    pass
                task.error = outcome.error
                task.transition(TaskState.TIMED_OUT, at=now_ms())
            else:
                try:
                    self.broker.nack(msg.msg_id, requeue=True)
                except UnknownMessage:
                    pass
                task.error = outcome.error
                task.transition(TaskState.FAILED, at=now_ms(), exit_code=outcome.exit_code)

            self._record_task_metrics(rs, task, msg, rc, outcome, queue_wait_s, active)
        except Exception as e:  # engine bug or broker loss: never leak the lease
            task.error = f"{type(e).__name__}: {e}"
            if task.state not in (TaskState.FAILED, TaskState.SUCCEEDED,
                                  TaskState.TIMED_OUT, TaskState.CANCELLED):
                try:
                    self.broker.nack(msg.msg_id, requeue=True)
                except Exception:
                    pass
                try:
                    task.transition(TaskState.FAILED, at=now_ms(), exit_code=None)
                except InvalidTransition:
                    pass
        finally:
            with self._lock:
                rs.active.pop(key, None)
            self._task_event(rs, task)

    def _register_pid(self, active: _ActiveTask, pid: int):
        active.pid = pid
        try:
            active.proc_handle = psutil.Process(pid)
            active.proc_handle.cpu_percent(None)
        except psutil.Error:
            active.proc_handle = None

    def _publish_with_backpressure(self, rs: _RunState, qname: str, payload: bytes,
                                   run_id: str, producer_step: str):
        while True:
            try:
                self.broker.publish(qname, payload,
                                    headers={"run_id": run_id, "producer_step": producer_step})
                return
            except QueueFull:
                if rs.cancelled.is_set():
                    raise
                time.sleep(self.poll_interval_s)

    def _task_event(self, rs: _RunState, task: TaskRun):
        self._emit(rs.handle.run_id, "TaskStateChanged", task.to_dict())

    def _record_task_metrics(self, rs: _RunState, task: TaskRun, msg: Message,
                             rc: ResourceClass, outcome, queue_wait_s: float,
                             active: _ActiveTask):
        run_id = rs.handle.run_id
        flushed: dict[str, float] = {}

        def put(metric: str, value: float, unit: str):
            rec = MetricRecord(run_id=run_id, step_id=task.step_id, attempt=task.attempt,
                               metric=metric, value=value, unit=unit,
                               msg_id=task.msg_id, resource_class=rc.id)
            self.store.append_metric(rec)
            flushed[metric] = value

        put("input_bytes", float(len(msg.payload)), "bytes")
        put("queue_wait_s", queue_wait_s, "s")
        if task.state == TaskState.SUCCEEDED:
            put("runtime_s", outcome.runtime_s, "s")
            if outcome.cpu_s is not None:
                put("cpu_s", outcome.cpu_s, "s")
            if active.max_rss_mb > 0:
                put("max_rss_mb", active.max_rss_mb, "MB")
            put("output_bytes", float(sum(len(p) for _, p in outcome.outputs)), "bytes")
        for key, value, unit in outcome.custom_metrics:
            put(key, value, unit)
        self._emit(run_id, "MetricFlushed", {
            "step_id": task.step_id, "msg_id": task.msg_id, "attempt": task.attempt,
            "metrics": flushed,
        })

    # -- run monitor -----------------------------------------------------------------

    def _monitor_run(self, rs: _RunState):
        run_id = rs.handle.run_id
        while not self._shutdown.is_set():
            time.sleep(self.poll_interval_s)
            if rs.cancelled.is_set():
                for q in rs.queues:
                    try:
                        self.broker.drain_to_dlq(q)
                    except UnknownQueue:
                        pass
                with self._lock:
                    busy = len(rs.active)
                if busy == 0 and self._queues_quiet(rs):
                    self._finish_run(rs, RunStatus.CANCELLED)
                    return
                continue
            if rs.paused.is_set():
                continue
            if self._queues_quiet(rs):
                status = RunStatus.FAILED if self._dead_letters(rs) else RunStatus.COMPLETED
                self._finish_run(rs, status)
                return

    def _queues_quiet(self, rs: _RunState) -> bool:
        depths = self.broker.queue_depths()
        return all(depths.get(q, (0, 0)) == (0, 0) for q in rs.queues)

    def _dead_letters(self, rs: _RunState) -> int:
        depths = self.broker.queue_depths()
        return sum(depths.get(q + ".dlq", (0, 0))[0] for q in rs.queues)

    def _finish_run(self, rs: _RunState, status: RunStatus):
        for q in rs.sink_queues:
            try:
                msgs = self.broker.drain(q)
            except UnknownQueue:
                msgs = []
            rs.results.extend(m.payload for m in msgs)
        with self._lock:
            rs.handle.status = status
        counts = {s.value: 0 for s in TaskState}
        for t in rs.tasks:
            counts[t.state.value] += 1
        self._emit(rs.handle.run_id, "RunCompleted", {
            "run_id": rs.handle.run_id, "status": status.value,
            "task_counts": {k: v for k, v in counts.items() if v},
            "dead_lettered": self._dead_letters(rs), "results_count": len(rs.results),
        })
        rs.done.set()

    # -- steering ----------------------------------------------------------------------

    def control_run(self, run_id: str, action: str, step: str | None = None,
                    n: int | None = None, actor: str = "anonymous") -> RunHandle:
        rs = self._get_run(run_id)
        body = {"action": action, "actor": actor}
        if step is not None:
            body["step"] = step
        if n is not None:
            body["n"] = n

        if action == "pause":
            with self._lock:
                if rs.handle.status != RunStatus.RUNNING:
                    raise InvalidTransition(f"pause from {rs.handle.status.value}")
                rs.paused.set()
                rs.handle.status = RunStatus.PAUSED
        elif action == "resume":
            with self._lock:
                if rs.handle.status != RunStatus.PAUSED:
                    raise InvalidTransition(f"resume from {rs.handle.status.value}")
                rs.paused.clear()
                rs.handle.status = RunStatus.RUNNING
        elif action == "cancel":
            with self._lock:
                if rs.handle.status in TERMINAL_RUN_STATUSES:
                    raise InvalidTransition(f"cancel from {rs.handle.status.value}")
                rs.paused.clear()
                rs.cancelled.set()
        elif action == "retry_step":
            self._retry_step(rs, step)
        elif action == "set_workers":
            self._set_workers(rs, step, n)
        else:
            raise InvalidTransition(f"unknown action: {action}")

        self._emit(run_id, "SteeringEvent", body)
        return self.run_handle(run_id)

    def _retry_step(self, rs: _RunState, step: str | None):
        if step is None or step not in rs.pools:
            raise UnknownStep(str(step))
        pool = rs.pools[step]
        republished = 0
        for q in pool.input_queues:
            try:
                dead = self.broker.drain(q + ".dlq")
            except UnknownQueue:
                dead = []
            for m in dead:
                self.broker.publish(q, m.payload, headers=m.headers)
                republished += 1
        with self._lock:
            was_terminal = rs.finished
            if was_terminal and republished:
                rs.handle.status = RunStatus.RUNNING
                rs.done.clear()
                rs.cancelled.clear()
        if was_terminal and republished:
            for p in rs.pools.values():
                self._resize_pool(rs, p)
            rs.monitor = threading.Thread(target=self._monitor_run, args=(rs,), daemon=True,
                                          name=f"monitor-{rs.handle.run_id}")
            rs.monitor.start()

    def _set_workers(self, rs: _RunState, step: str | None, n: int | None):
        if rs.handle.mode != "scaled":
            raise InvalidTransition("set_workers requires scaled mode")
        if step is None or step not in rs.pools:
            raise UnknownStep(str(step))
        if not isinstance(n, int) or n < 1 or n > self.max_workers:
            raise SpecInvalid(f"worker count out of range: {n}")
        with self._lock:
            pool = rs.pools[step]
            pool.target_size = n
            rs.handle.worker_counts[step] = n
        self._resize_pool(rs, pool)

    def preempt_step(self, run_id: str, step_id: str) -> int:
        """Kill running subprocess attempts of a step (fault-forecast preemption)."""
        rs = self._get_run(run_id)
        killed = 0
        with self._lock:
            handles = [a.proc_handle for a in rs.active.values()
                       if a.step.id == step_id and a.proc_handle is not None]
        for h in handles:
            try:
                h.kill()
                killed += 1
            except psutil.Error:
                pass
        return killed

    # -- snapshots -----------------------------------------------------------------------

    def _get_run(self, run_id: str) -> _RunState:
        with self._lock:
            rs = self._runs.get(run_id)
        if rs is None:
            raise UnknownRun(run_id)
        return rs

    def run_handle(self, run_id: str) -> RunHandle:
        rs = self._get_run(run_id)
        with self._lock:
            return rs.handle.snapshot()

    def list_runs(self) -> list[RunHandle]:
        with self._lock:
            return [rs.handle.snapshot() for rs in self._runs.values()]

    def task_runs(self, run_id: str) -> list[TaskRun]:
        rs = self._get_run(run_id)
        with self._lock:
            return list(rs.tasks)

    def results(self, run_id: str) -> list[bytes]:
        rs = self._get_run(run_id)
        with self._lock:
            return list(rs.results)

    def queue_depths_for(self, run_id: str) -> dict[str, tuple[int, int]]:
        """Depths keyed by channel id (plus _source.*/_sink.* pseudo-channels)."""
        rs = self._get_run(run_id)
        prefix = run_id + "."
        depths = self.broker.queue_depths()
        return {q[len(prefix):]: d for q, d in depths.items() if q.startswith(prefix)}

    def wait(self, run_id: str, timeout: float | None = None) -> RunHandle:
        rs = self._get_run(run_id)
        rs.done.wait(timeout)
        return self.run_handle(run_id)

    # -- one-shot execution (ppods test runner, domain services) ---------------------------

    def execute_task(self, step: StepSpec, msg: Message, rc: ResourceClass,
                     run_id: str = "adhoc") -> tuple[TaskRun, list[bytes]]:
        task = TaskRun(run_id=run_id, workflow_id="", workflow_version=0,
                       step_id=step.id, msg_id=msg.msg_id, attempt=msg.attempt,
                       resource_class=rc.id)
        task.transition(TaskState.SCHEDULED, at=now_ms())
        task.transition(TaskState.RUNNING, at=now_ms())
        ctx = StepContext(run_id=run_id, step_id=step.id, attempt=msg.attempt,
                          broker_addr=self.broker_addr)
        outcome = run_step(step, msg.payload, ctx)
        if outcome.ok:
            task.transition(TaskState.SUCCEEDED, at=now_ms(), exit_code=0)
        elif outcome.timed_out:
            task.error = outcome.error
            task.transition(TaskState.TIMED_OUT, at=now_ms())
        else:
            task.error = outcome.error
            task.transition(TaskState.FAILED, at=now_ms(), exit_code=outcome.exit_code)
        self._record_adhoc_metrics(run_id, task, msg, rc, outcome)
        return task, [p for _, p in outcome.outputs]

    def _record_adhoc_metrics(self, run_id: str, task: TaskRun, msg: Message,
                              rc: ResourceClass, outcome):
        def put(metric: str, value: float, unit: str):
            self.store.append_metric(MetricRecord(
                run_id=run_id, step_id=task.step_id, attempt=task.attempt,
                metric=metric, value=value, unit=unit, msg_id=task.msg_id,
                resource_class=rc.id))

        put("input_bytes", float(len(msg.payload)), "bytes")
        put("queue_wait_s", 0.0, "s")
        if task.state == TaskState.SUCCEEDED:
            put("runtime_s", outcome.runtime_s, "s")
            if outcome.cpu_s is not None:
                put("cpu_s", outcome.cpu_s, "s")
            put("output_bytes", float(sum(len(p) for _, p in outcome.outputs)), "bytes")
        for key, value, unit in outcome.custom_metrics:
            put(key, value, unit)

    # -- trail sampling ---------------------------------------------------------------------

    def _ensure_trail_thread(self):
        if not self.record_trail or self._trail_thread is not None:
            return
        self._trail_thread = threading.Thread(target=self._trail_loop, daemon=True,
                                              name="trail-sampler")
        self._trail_thread.start()

    def _trail_loop(self):
        period_s = max(0.05, self.trail_period_ms / 1000.0)
        self_proc = psutil.Process()
        self_proc.cpu_percent(None)
        cores = psutil.cpu_count() or 1
        while not self._shutdown.is_set():
            time.sleep(period_s)
            with self._lock:
                actives = [(rs, a) for rs in self._runs.values() if not rs.finished
                           for a in rs.active.values()]
            if not actives:
                continue
            depths = self.broker.queue_depths()
            t = now_ms()
            for rs, a in actives:
                proc = a.proc_handle if a.proc_handle is not None else self_proc
                try:
                    cpu = min(1.0, max(0.0, proc.cpu_percent(None) / 100.0 / cores))
                    mem_mb = proc.memory_info().rss / (1024 * 1024)
                except psutil.Error:
                    continue
                a.max_rss_mb = max(a.max_rss_mb, mem_mb)
                lag = float(sum(depths.get(q, (0, 0))[0] for q in a.input_queues))
                try:
                    self.store.append_trail(TrailSample(
                        run_id=rs.handle.run_id, step_id=a.step.id, t=t,
                        cpu_util=cpu, mem_mb=mem_mb, queue_lag=lag, attempt=a.task.attempt))
                except Exception:
                    pass  # sampling is best-effort

    def shutdown(self, timeout_s: float = 30.0):
        deadline = time.monotonic() + timeout_s
        for rs in list(self._runs.values()):
            remaining = max(0.1, deadline - time.monotonic())
            rs.done.wait(min(remaining, 0.2) if rs.handle.status == RunStatus.PAUSED else remaining)
        self._shutdown.set()
