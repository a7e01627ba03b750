"""Append-only store of run events, task metrics, and system-state trails.

Layout under the data root: ``runs/<run_id>/`` holding ``events.ndjson``,
``metrics.ndjson`` and ``trail.ndjson``, one JSON object per line, first
line ``{"schema": "flowforge/provenance", "v": 1}``. In-memory indices are
rebuilt on open; nothing is ever mutated or deleted.

Event sequence numbers are gapless per run. Metric and trail records carry
their own per-run counters. ``runtime_s``, ``cpu_s``, ``max_rss_mb`` and
``output_bytes`` are recorded for succeeded attempts only, so step-level
summaries and prediction features reflect successful history; ``input_bytes``
and ``queue_wait_s`` are recorded for every attempt.

A subscription is a cursor over the retained event list, so slow consumers
delay only themselves and can never lose events.
"""

from __future__ import annotations

import math
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import quote, unquote

from .errors import InvalidRecord, NoData, UnknownRun
from .ndjson import AppendLog, read_records

SCHEMA_HEADER = {"schema": "flowforge/provenance", "v": 1}

REGISTERED_METRICS = (
    "runtime_s", "cpu_s", "max_rss_mb", "input_bytes", "output_bytes", "queue_wait_s",
)
_CUSTOM_METRIC_RE = re.compile(r"^custom\.[A-Za-z0-9_.:-]+$")

EVENT_KINDS = (
    "RunStarted", "TaskStateChanged", "SteeringEvent", "MetricFlushed",
    "AnomalyDetected", "FaultForecast", "RunCompleted",
)


def now_ms() -> int:
    return int(time.time() * 1000)


def summary_stats(values: list[float]) -> dict:
    """n, mean, n-1 sample stddev (0.0 when n=1), min/max, nearest-rank p50/p95."""
    values = sorted(values)
    n = len(values)
    mean = sum(values) / n
    stddev = math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0

    def nearest_rank(p: float) -> float:
        return values[max(0, math.ceil(p / 100.0 * n) - 1)]

    return {"n": n, "mean": mean, "stddev": stddev, "min": values[0], "max": values[-1],
            "p50": nearest_rank(50), "p95": nearest_rank(95)}


@dataclass
class MetricRecord:
    run_id: str
    step_id: str
    attempt: int
    metric: str
    value: float
    unit: str = ""
    recorded_at: int = 0
    msg_id: str | None = None          # task identity for per-task feature joins
    resource_class: str | None = None  # execution class for per-class models
    simulated: bool = False
    seq: int = 0

    def to_dict(self) -> dict:
        d = {
            "run_id": self.run_id, "step_id": self.step_id, "attempt": self.attempt,
            "metric": self.metric, "value": self.value, "unit": self.unit,
            "recorded_at": self.recorded_at, "seq": self.seq,
        }
        if self.msg_id is not None:
            d["msg_id"] = self.msg_id
        if self.resource_class is not None:
            d["resource_class"] = self.resource_class
        if self.simulated:
            d["simulated"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        return cls(
            run_id=d["run_id"], step_id=d["step_id"], attempt=d["attempt"],
            metric=d["metric"], value=d["value"], unit=d.get("unit", ""),
            recorded_at=d.get("recorded_at", 0), msg_id=d.get("msg_id"),
            resource_class=d.get("resource_class"),
            simulated=d.get("simulated", False), seq=d.get("seq", 0),
        )


@dataclass
class TrailSample:
    run_id: str
    step_id: str
    t: int
    cpu_util: float
    mem_mb: float
    queue_lag: float
    attempt: int = 1
    seq: int = 0

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id, "step_id": self.step_id, "t": self.t,
            "cpu_util": self.cpu_util, "mem_mb": self.mem_mb,
            "queue_lag": self.queue_lag, "attempt": self.attempt, "seq": self.seq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrailSample":
        return cls(
            run_id=d["run_id"], step_id=d["step_id"], t=d["t"],
            cpu_util=d["cpu_util"], mem_mb=d["mem_mb"], queue_lag=d["queue_lag"],
            attempt=d.get("attempt", 1), seq=d.get("seq", 0),
        )


@dataclass
class Event:
    run_id: str
    seq: int
    kind: str
    body: dict
    at: int

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "seq": self.seq, "kind": self.kind,
                "body": self.body, "at": self.at}

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        return cls(run_id=d["run_id"], seq=d["seq"], kind=d["kind"],
                   body=d.get("body", {}), at=d.get("at", 0))


@dataclass
class _RunData:
    events: list[Event] = field(default_factory=list)
    metrics: list[MetricRecord] = field(default_factory=list)
    trail: list[TrailSample] = field(default_factory=list)
    last_trail_t: dict[tuple[str, int], int] = field(default_factory=dict)
    files: dict[str, AppendLog] = field(default_factory=dict)


class Subscription:
    """Ordered, exactly-once cursor over a run's events ('*' = all runs)."""

    def __init__(self, store: "ProvenanceStore", run_id: str, from_seq: int):
        self._store = store
        self._run_id = run_id
        self._next = max(1, from_seq)
        self._closed = False

    def get(self, timeout: float | None = None) -> Event | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._store._cond:
            while not self._closed:
                ev = self._store._event_at(self._run_id, self._next)
                if ev is not None:
                    self._next += 1
                    return ev
                if deadline is None:
                    self._store._cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0 or not self._store._cond.wait(remaining):
                        return None
            return None

    def close(self):
        with self._store._cond:
            self._closed = True
            self._store._cond.notify_all()

    def __iter__(self):
        while True:
            ev = self.get()
            if ev is None:
                return
            yield ev


class ProvenanceStore:
    """``root=None`` keeps everything in memory (fast tests, simulations)."""

    def __init__(self, root: str | Path | None = None, fsync: str = "interval:100"):
        self._root = Path(root) if root is not None else None
        self._fsync = fsync
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._runs: dict[str, _RunData] = {}
        self._global_events: list[Event] = []
        if self._root is not None:
            self._load()

    # -- files ----------------------------------------------------------------

    def _run_dir(self, run_id: str) -> Path:
        return self._root / "runs" / quote(run_id, safe="")

    def _load(self):
        runs_dir = self._root / "runs"
        if not runs_dir.is_dir():
            return
        loaded: list[Event] = []
        for d in sorted(runs_dir.iterdir()):
            if not d.is_dir():
                continue
            run_id = unquote(d.name)
            data = _RunData()
            ev_path = d / "events.ndjson"
            if ev_path.exists():
                for rec in read_records(ev_path, skip_header=True):
                    data.events.append(Event.from_dict(rec))
            for rec_path, attr, cls in ((d / "metrics.ndjson", "metrics", MetricRecord),
                                        (d / "trail.ndjson", "trail", TrailSample)):
                if rec_path.exists():
                    getattr(data, attr).extend(cls.from_dict(r) for r in read_records(rec_path, skip_header=True))
            for s in data.trail:
                key = (s.step_id, s.attempt)
                data.last_trail_t[key] = max(s.t, data.last_trail_t.get(key, 0))
            self._runs[run_id] = data
            loaded.extend(data.events)
        # The interleaved '*' stream cannot recover cross-run order from
        # per-run files; replay groups by run, ordered by (at, run, seq).
        loaded.sort(key=lambda e: (e.at, e.run_id, e.seq))
        self._global_events = loaded

    def _file(self, run_id: str, name: str) -> AppendLog | None:
        if self._root is None:
            return None
        data = self._runs[run_id]
        log = data.files.get(name)
        if log is None:
            log = AppendLog(self._run_dir(run_id) / name, fsync=self._fsync, header=SCHEMA_HEADER)
            data.files[name] = log
        return log

    def _run(self, run_id: str) -> _RunData:
        data = self._runs.get(run_id)
        if data is None:
            data = _RunData()
            self._runs[run_id] = data
        return data

    # -- appends ---------------------------------------------------------------

    def append(self, record: "MetricRecord | TrailSample | Event") -> int:
        if isinstance(record, MetricRecord):
            return self.append_metric(record)
        if isinstance(record, TrailSample):
            return self.append_trail(record)
        if isinstance(record, Event):
            return self.append_event(record.run_id, record.kind, record.body, record.at or None)
        raise InvalidRecord(f"unsupported record type: {type(record).__name__}")

    def append_metric(self, rec: MetricRecord) -> int:
        if not (rec.metric in REGISTERED_METRICS or _CUSTOM_METRIC_RE.match(rec.metric)):
            raise InvalidRecord(f"unregistered metric key: {rec.metric}")
        if not isinstance(rec.value, (int, float)) or isinstance(rec.value, bool) or not math.isfinite(rec.value):
            raise InvalidRecord(f"metric value must be finite: {rec.value!r}")
        if rec.attempt < 1:
            raise InvalidRecord("attempt must be >= 1")
        with self._lock:
            data = self._run(rec.run_id)
            rec.seq = len(data.metrics) + 1
            if not rec.recorded_at:
                rec.recorded_at = now_ms()
            log = self._file(rec.run_id, "metrics.ndjson")
            if log:
                log.write(rec.to_dict())
            data.metrics.append(rec)
            return rec.seq

    def append_trail(self, rec: TrailSample) -> int:
        if not (0.0 <= rec.cpu_util <= 1.0):
            raise InvalidRecord(f"cpu_util out of [0,1]: {rec.cpu_util}")
        if rec.mem_mb < 0 or rec.queue_lag < 0:
            raise InvalidRecord("mem_mb and queue_lag must be >= 0")
        if not all(math.isfinite(v) for v in (rec.cpu_util, rec.mem_mb, rec.queue_lag)):
            raise InvalidRecord("trail values must be finite")
        with self._lock:
            data = self._run(rec.run_id)
            key = (rec.step_id, rec.attempt)
            last = data.last_trail_t.get(key)
            if last is not None and rec.t < last:
                raise InvalidRecord(f"trail t went backwards for {key}: {rec.t} < {last}")
            data.last_trail_t[key] = rec.t
            rec.seq = len(data.trail) + 1
            log = self._file(rec.run_id, "trail.ndjson")
            if log:
                log.write(rec.to_dict())
            data.trail.append(rec)
            return rec.seq

    def append_event(self, run_id: str, kind: str, body: dict | None = None, at: int | None = None) -> int:
        if kind not in EVENT_KINDS:
            raise InvalidRecord(f"unknown event kind: {kind}")
        with self._cond:
            data = self._run(run_id)
            ev = Event(run_id=run_id, seq=len(data.events) + 1, kind=kind,
                       body=body or {}, at=at if at is not None else now_ms())
            log = self._file(run_id, "events.ndjson")
            if log:
                log.write(ev.to_dict())
            data.events.append(ev)
            self._global_events.append(ev)
            self._cond.notify_all()
            return ev.seq

    # -- queries ---------------------------------------------------------------

    def runs(self) -> list[str]:
        with self._lock:
            return sorted(self._runs)

    def has_run(self, run_id: str) -> bool:
        with self._lock:
            return run_id in self._runs

    def query_metrics(self, run_id: str | None = None, step_id: str | None = None,
                      metric: str | None = None,
                      time_range: tuple[int, int] | None = None) -> list[MetricRecord]:
        """Matching records ordered by (recorded_at, seq); bounds inclusive."""
        with self._lock:
            if run_id is not None:
                pools = [self._runs[run_id]] if run_id in self._runs else []
            else:
                pools = [self._runs[r] for r in sorted(self._runs)]
            out = []
            for data in pools:
                for rec in data.metrics:
                    if step_id is not None and rec.step_id != step_id:
                        continue
                    if metric is not None and rec.metric != metric:
                        continue
                    if time_range is not None and not (time_range[0] <= rec.recorded_at <= time_range[1]):
                        continue
                    out.append(rec)
            out.sort(key=lambda r: (r.recorded_at, r.seq))
            return out

    def query_trail(self, run_id: str | None = None, step_id: str | None = None,
                    attempt: int | None = None) -> list[TrailSample]:
        with self._lock:
            if run_id is not None:
                pools = [self._runs[run_id]] if run_id in self._runs else []
            else:
                pools = [self._runs[r] for r in sorted(self._runs)]
            out = []
            for data in pools:
                for s in data.trail:
                    if step_id is not None and s.step_id != step_id:
                        continue
                    if attempt is not None and s.attempt != attempt:
                        continue
                    out.append(s)
            out.sort(key=lambda s: (s.t, s.seq))
            return out

    def events(self, run_id: str) -> list[Event]:
        with self._lock:
            if run_id not in self._runs:
                raise UnknownRun(run_id)
            return list(self._runs[run_id].events)

    def _event_at(self, run_id: str, seq: int) -> Event | None:
        if run_id == "*":
            return self._global_events[seq - 1] if seq <= len(self._global_events) else None
        data = self._runs.get(run_id)
        if data is None or seq > len(data.events):
            return None
        return data.events[seq - 1]

    def subscribe_events(self, run_id: str, from_seq: int = 1) -> Subscription:
        with self._lock:
            if run_id != "*" and run_id not in self._runs:
                raise UnknownRun(run_id)
        return Subscription(self, run_id, from_seq)

    def summarize_step(self, step_id: str, metric: str) -> dict:
        """Sample statistics over every record of (step, metric), all runs."""
        values = [r.value for r in self.query_metrics(step_id=step_id, metric=metric)]
        if not values:
            raise NoData(f"no records for step={step_id} metric={metric}")
        return summary_stats(values)

    def metric_watermark(self) -> int:
        """Total metric appends ever; cheap cache-invalidation key."""
        with self._lock:
            return sum(len(d.metrics) for d in self._runs.values())

    def close(self):
        with self._lock:
            for data in self._runs.values():
                for log in data.files.values():
                    log.close()
                data.files.clear()
