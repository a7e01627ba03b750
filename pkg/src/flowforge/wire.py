"""NDJSON-over-TCP wire protocol for the broker.

One JSON request object per line, one JSON response per line, UTF-8.
Payloads travel base64-encoded. Errors use ``{"ok": false, "error": code,
"detail": ...}`` with the codes from `flowforge.errors`.
"""

from __future__ import annotations

import base64
import json
import socket
import socketserver
import threading

from .broker import Broker, Message
from .errors import FlowforgeError


def _handle_request(broker: Broker, req: dict) -> dict:
    op = req.get("op")
    if op == "publish":
        payload = base64.b64decode(req.get("payload_b64", ""))
        msg_id = broker.publish(req["queue"], payload, req.get("headers") or {})
        return {"ok": True, "msg_id": msg_id}
    if op == "consume":
        msg = broker.consume(req["queue"], float(req.get("lease_s", 30.0)))
        return {"ok": True, "message": msg.to_dict() if msg else None}
    if op == "ack":
        broker.ack(req["msg_id"])
        return {"ok": True}
    if op == "nack":
        broker.nack(req["msg_id"], bool(req.get("requeue", False)))
        return {"ok": True}
    if op == "depths":
        depths = broker.queue_depths()
        return {"ok": True, "depths": {q: {"ready": r, "in_flight": f} for q, (r, f) in depths.items()}}
    if op == "declare":
        broker.declare_queue(req["queue"], int(req.get("capacity", 1024)), req.get("max_attempts"))
        return {"ok": True}
    return {"ok": False, "error": "UNKNOWN_OP", "detail": str(op)}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        broker = self.server.broker  # type: ignore[attr-defined]
        while True:
            line = self.rfile.readline()
            if not line:
                return
            line = line.strip()
            if not line:
                continue
            try:
                req = json.loads(line)
                resp = _handle_request(broker, req)
            except FlowforgeError as e:
                resp = {"ok": False, "error": e.code, "detail": e.detail}
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                resp = {"ok": False, "error": "BAD_REQUEST", "detail": str(e)}
            try:
                self.wfile.write(json.dumps(resp, separators=(",", ":")).encode() + b"\n")
            except (BrokenPipeError, ConnectionResetError):
                return


class BrokerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 7601):
        super().__init__((host, port), _Handler)
        self.broker = broker
        self._thread: threading.Thread | None = None

    @property
    def addr(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True, name="broker-server")
        self._thread.start()

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread:
            self._thread.join(timeout=5)


class BrokerClient:
    """Blocking client with the same surface as `Broker`; one in-flight
    request per connection."""

    def __init__(self, addr: str, timeout_s: float = 30.0):
        host, _, port = addr.rpartition(":")
        self._addr = (host or "127.0.0.1", int(port))
        self._timeout_s = timeout_s
        self._lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._rfile = None

    def _connect(self):
        self._sock = socket.create_connection(self._addr, timeout=self._timeout_s)
        self._rfile = self._sock.makefile("rb")

    def _request(self, req: dict) -> dict:
        with self._lock:
            if self._sock is None:
                self._connect()
            self._sock.sendall(json.dumps(req, separators=(",", ":")).encode() + b"\n")
            line = self._rfile.readline()
            if not line:
                raise ConnectionError("broker closed connection")
            resp = json.loads(line)
        if not resp.get("ok"):
            raise _error_class(resp.get("error", "ERROR"))(resp.get("detail", ""))
        return resp

    def declare_queue(self, qid: str, capacity: int = 1024, max_attempts: int | None = None):
        self._request({"op": "declare", "queue": qid, "capacity": capacity, "max_attempts": max_attempts})

    def publish(self, queue: str, payload: bytes, headers: dict[str, str] | None = None) -> str:
        resp = self._request({
            "op": "publish", "queue": queue,
            "payload_b64": base64.b64encode(payload).decode("ascii"),
            "headers": headers or {},
        })
        return resp["msg_id"]

    def consume(self, queue: str, lease_s: float) -> Message | None:
        resp = self._request({"op": "consume", "queue": queue, "lease_s": lease_s})
        m = resp.get("message")
        return Message.from_dict(m) if m else None

    def ack(self, msg_id: str):
        self._request({"op": "ack", "msg_id": msg_id})

    def nack(self, msg_id: str, requeue: bool):
        self._request({"op": "nack", "msg_id": msg_id, "requeue": requeue})

    def queue_depths(self) -> dict[str, tuple[int, int]]:
        resp = self._request({"op": "depths"})
        return {q: (d["ready"], d["in_flight"]) for q, d in resp["depths"].items()}

    def close(self):
        with self._lock:
            if self._sock is not None:
                self._sock.close()
                self._sock = None
                self._rfile = None


def _error_class(code: str):
    from . import errors

    for name in dir(errors):
        cls = getattr(errors, name)
        if isinstance(cls, type) and issubclass(cls, FlowforgeError) and getattr(cls, "code", None) == code:
            return cls
    return FlowforgeError
