"""Message broker: named FIFO queues with lease-based at-least-once delivery.

Consumers take a message under a lease (visibility timeout); an unacked
message whose lease expires is redelivered at the head of the queue with its
attempt count incremented. Once the consuming step's retry budget is
exhausted the message is routed to ``<queue>.dlq``.

Durability is an append-only NDJSON operation log per queue, replayed on
startup; leases do not survive a restart (in-flight messages reappear as
ready). All operations are atomic under one broker lock.
"""

from __future__ import annotations

import base64
import json
import os
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import quote, unquote

from .config import MAX_PAYLOAD_BYTES
from .errors import PayloadTooLarge, QueueFull, UnknownMessage, UnknownQueue

DLQ_SUFFIX = ".dlq"
_DLQ_CAPACITY = 2**62


@dataclass
class Message:
    msg_id: str
    queue: str
    payload: bytes
    attempt: int = 1
    enqueued_at: int = 0
    headers: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "msg_id": self.msg_id,
            "queue": self.queue,
            "payload_b64": base64.b64encode(self.payload).decode("ascii"),
            "attempt": self.attempt,
            "enqueued_at": self.enqueued_at,
            "headers": dict(self.headers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        return cls(
            msg_id=d["msg_id"],
            queue=d["queue"],
            payload=base64.b64decode(d["payload_b64"]),
            attempt=d["attempt"],
            enqueued_at=d["enqueued_at"],
            headers=dict(d.get("headers", {})),
        )


class _Queue:
    __slots__ = ("id", "capacity", "max_attempts", "ready", "in_flight", "log")

    def __init__(self, qid: str, capacity: int, max_attempts: int | None, log: "_QueueLog | None"):
        self.id = qid
        self.capacity = capacity
        self.max_attempts = max_attempts
        self.ready: deque[Message] = deque()
        self.in_flight: dict[str, tuple[Message, float]] = {}  # msg_id -> (msg, deadline_s)
        self.log = log

    def size(self) -> int:
        return len(self.ready) + len(self.in_flight)


class _QueueLog:
    def __init__(self, path: Path, fsync_policy: str):
        self.path = path
        self._fh = open(path, "ab")
        self._always = fsync_policy == "always"
        self._interval_s = 0.1
        if fsync_policy.startswith("interval:"):
            self._interval_s = int(fsync_policy.split(":", 1)[1]) / 1000.0
        self._last_sync = time.monotonic()

    def write(self, record: dict):
        self._fh.write(json.dumps(record, separators=(",", ":")).encode() + b"\n")
        self._fh.flush()
        now = time.monotonic()
        if self._always or now - self._last_sync >= self._interval_s:
            os.fsync(self._fh.fileno())
            self._last_sync = now

    def close(self):
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self._fh.close()


class Broker:
    """In-process broker; see `flowforge.wire` for the TCP surface.

    ``log_dir=None`` disables durability (memory-only, used by fast tests).
    ``clock`` returns seconds and exists so tests can drive lease expiry
    deterministically.
    """

    def __init__(self, log_dir: str | Path | None = None, fsync: str = "interval:100",
                 clock=time.time):
        self._lock = threading.RLock()
        self._queues: dict[str, _Queue] = {}
        self._inflight_index: dict[str, str] = {}  # msg_id -> queue id
        self._clock = clock
        self._fsync = fsync
        self._log_dir = Path(log_dir) if log_dir is not None else None
        if self._log_dir is not None:
            self._log_dir.mkdir(parents=True, exist_ok=True)
            self._replay()

    # -- durability ----------------------------------------------------------

    def _log_path(self, qid: str) -> Path:
        return self._log_dir / (quote(qid, safe="") + ".ndjson")

    def _open_log(self, qid: str) -> _QueueLog | None:
        if self._log_dir is None:
            return None
        return _QueueLog(self._log_path(qid), self._fsync)

    def _replay(self):
        for path in sorted(self._log_dir.glob("*.ndjson")):
            qid = unquote(path.name[: -len(".ndjson")])
            msgs: dict[str, Message] = {}
            order: list[str] = []
            capacity, max_attempts = 1024, None
            with open(path, "rb") as fh:
                for raw in fh:
                    raw = raw.strip()
                    if not raw:
                        continue
                    try:
                        rec = json.loads(raw)
                    except json.JSONDecodeError:
                        break  # torn tail write from a crash
                    op = rec.get("op")
                    if op == "decl":
                        capacity = rec["capacity"]
                        max_attempts = rec["max_attempts"]
                    elif op == "pub":
                        m = Message.from_dict(rec["msg"])
                        msgs[m.msg_id] = m
                        order.append(m.msg_id)
                    elif op == "ack" or op == "dlq":
                        mid = rec["msg_id"]
                        msgs.pop(mid, None)
                        if mid in order:
                            order.remove(mid)
                    elif op == "rq":
                        mid = rec["msg_id"]
                        if mid in msgs:
                            msgs[mid].attempt = rec["attempt"]
                            order.remove(mid)
                            order.insert(0, mid)
            q = _Queue(qid, capacity, max_attempts, _QueueLog(path, self._fsync))
            q.ready.extend(msgs[mid] for mid in order)
            self._queues[qid] = q

    # -- queue management ----------------------------------------------------

    def declare_queue(self, qid: str, capacity: int = 1024, max_attempts: int | None = None):
        with self._lock:
            q = self._queues.get(qid)
            if q is None:
                q = _Queue(qid, capacity, max_attempts, self._open_log(qid))
                self._queues[qid] = q
            else:
                q.capacity = capacity
                q.max_attempts = max_attempts
            if q.log:
                q.log.write({"op": "decl", "capacity": capacity, "max_attempts": max_attempts})

    def _dlq_for(self, qid: str) -> _Queue:
        dlq_id = qid + DLQ_SUFFIX
        q = self._queues.get(dlq_id)
        if q is None:
            q = _Queue(dlq_id, _DLQ_CAPACITY, None, self._open_log(dlq_id))
            self._queues[dlq_id] = q
        return q

    def queues(self) -> list[str]:
        with self._lock:
            return sorted(self._queues)

    # -- lease expiry --------------------------------------------------------

    def _sweep(self):
        now = self._clock()
        for q in list(self._queues.values()):  # DLQ creation mutates the dict
            if not q.in_flight:
                continue
            expired = [mid for mid, (_, dl) in q.in_flight.items() if dl <= now]
            if not expired:
                continue
            expired.sort(key=lambda mid: q.in_flight[mid][1])
            for mid in reversed(expired):  # earliest-expired ends up at the head
                msg, _ = q.in_flight.pop(mid)
                self._inflight_index.pop(mid, None)
                self._retry_or_dlq(q, msg)

    def _retry_or_dlq(self, q: _Queue, msg: Message):
        if q.max_attempts is not None and msg.attempt + 1 > q.max_attempts:
            self._move_to_dlq(q, msg)
            return
        msg.attempt += 1
        if q.log:
            q.log.write({"op": "rq", "msg_id": msg.msg_id, "attempt": msg.attempt})
        q.ready.appendleft(msg)

    def _move_to_dlq(self, q: _Queue, msg: Message):
        dlq = self._dlq_for(q.id)
        msg.queue = dlq.id
        if q.log:
            q.log.write({"op": "dlq", "msg_id": msg.msg_id})
        if dlq.log:
            dlq.log.write({"op": "pub", "msg": msg.to_dict()})
        dlq.ready.append(msg)

    # -- operations ----------------------------------------------------------

    def publish(self, queue: str, payload: bytes, headers: dict[str, str] | None = None) -> str:
        if len(payload) > MAX_PAYLOAD_BYTES:
            raise PayloadTooLarge(f"payload {len(payload)} bytes exceeds 16 MiB")
        with self._lock:
            self._sweep()
            q = self._queues.get(queue)
            if q is None:
                raise UnknownQueue(queue)
            if q.size() >= q.capacity:
                raise QueueFull(f"queue {queue} at capacity {q.capacity}")
            msg = Message(
                msg_id=str(uuid.uuid4()),
                queue=queue,
                payload=payload,
                attempt=1,
                enqueued_at=int(self._clock() * 1000),
                headers=dict(headers or {}),
            )
            if q.log:
                q.log.write({"op": "pub", "msg": msg.to_dict()})
            q.ready.append(msg)
            return msg.msg_id

    def consume(self, queue: str, lease_s: float) -> Message | None:
        with self._lock:
            self._sweep()
            q = self._queues.get(queue)
            if q is None:
                raise UnknownQueue(queue)
            if not q.ready:
                return None
            msg = q.ready.popleft()
            q.in_flight[msg.msg_id] = (msg, self._clock() + lease_s)
            self._inflight_index[msg.msg_id] = queue
            return msg

    def ack(self, msg_id: str):
        with self._lock:
            self._sweep()
            qid = self._inflight_index.pop(msg_id, None)
            if qid is None:
                raise UnknownMessage(msg_id)
            q = self._queues[qid]
            q.in_flight.pop(msg_id)
            if q.log:
                q.log.write({"op": "ack", "msg_id": msg_id})

    def nack(self, msg_id: str, requeue: bool):
        with self._lock:
            self._sweep()
            qid = self._inflight_index.pop(msg_id, None)
            if qid is None:
                raise UnknownMessage(msg_id)
            q = self._queues[qid]
            msg, _ = q.in_flight.pop(msg_id)
            if requeue:
                self._retry_or_dlq(q, msg)
            else:
                self._move_to_dlq(q, msg)

    def queue_depths(self) -> dict[str, tuple[int, int]]:
        with self._lock:
            self._sweep()
            return {qid: (len(q.ready), len(q.in_flight)) for qid, q in sorted(self._queues.items())}

    # -- bulk helpers used by the executor ------------------------------------

    def drain_to_dlq(self, queue: str) -> int:
        """Move every ready message of ``queue`` to its DLQ (run cancellation)."""
        with self._lock:
            self._sweep()
            q = self._queues.get(queue)
            if q is None:
                raise UnknownQueue(queue)
            n = 0
            while q.ready:
                self._move_to_dlq(q, q.ready.popleft())
                n += 1
            return n

    def drain(self, queue: str) -> list[Message]:
        """Remove and return every ready message (DLQ replay)."""
        with self._lock:
            self._sweep()
            q = self._queues.get(queue)
            if q is None:
                raise UnknownQueue(queue)
            out = []
            while q.ready:
                msg = q.ready.popleft()
                if q.log:
                    q.log.write({"op": "ack", "msg_id": msg.msg_id})
                out.append(msg)
            return out

    def close(self):
        with self._lock:
            for q in self._queues.values():
                if q.log:
                    q.log.close()
                    q.log = None
