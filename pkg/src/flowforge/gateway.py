"""HTTP monitoring and steering gateway.

All routes live under ``/api/v1``. Steering requires an
``X-Flowforge-Actor`` header whose configured permission is ``steer``;
every steering mutation is appended to the event log before the response
goes out. The live stream is Server-Sent Events with ``id:`` = event seq
and ``Last-Event-ID`` resume (also accepted as the ``last_event_id`` query
parameter for clients that cannot set headers).

Errors share the broker's envelope shape: ``{"ok": false, "code": ...,
"detail": ...}``.
"""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .app import FlowforgeApp
from .errors import FlowforgeError, GateBlocked, SchemaError, UnknownRun, WorkflowSyntaxError
from .model import parse_workflow

_STATUS_BY_CODE = {
    "SYNTAX": 400, "SCHEMA": 400, "UNKNOWN_PARAM": 400, "INVALID_RECORD": 400,
    "SPEC_INVALID": 400, "INVALID_TARGET": 400, "PAYLOAD_TOO_LARGE": 400,
    "BAD_REQUEST": 400,
    "UNKNOWN_RUN": 404, "UNKNOWN_QUEUE": 404, "UNKNOWN_STEP": 404, "NO_DATA": 404,
    "NO_MODELS": 404, "UNKNOWN_SERVICE": 404, "INSUFFICIENT_HISTORY": 404,
    "NO_TRAIL_DATA": 404, "NOT_FOUND": 404, "UNKNOWN_WORKFLOW": 404,
    "INVALID_TRANSITION": 409, "WRONG_PHASE": 409, "MISSING_REPORTS": 409,
    "MISSING_CONSENSUS": 409, "GATE_BLOCKED": 409, "DUPLICATE_ID": 409,
    "QUEUE_FULL": 409, "CYCLE": 400,
    "UNAUTHENTICATED": 401, "FORBIDDEN": 403,
}


class _HttpError(Exception):
    def __init__(self, status: int, code: str, detail: str, extra: dict | None = None):
        self.status = status
        self.code = code
        self.detail = detail
        self.extra = extra or {}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "flowforge"

    # -- plumbing ---------------------------------------------------------------

    def log_message(self, fmt, *args):  # tests stay quiet
        pass

    @property
    def app(self) -> FlowforgeApp:
        return self.server.app  # type: ignore[attr-defined]

    def _send_json(self, status: int, body: dict):
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Connection", "close")
        self.end_headers()
        self.wfile.write(data)

    def _send_error_envelope(self, status: int, code: str, detail: str, extra: dict | None = None):
        self._send_json(status, {"ok": False, "code": code, "detail": detail, **(extra or {})})

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            body = json.loads(raw)
        except json.JSONDecodeError as e:
            raise _HttpError(400, "BAD_REQUEST", f"invalid JSON body: {e}")
        if not isinstance(body, dict):
            raise _HttpError(400, "BAD_REQUEST", "body must be a JSON object")
        return body

    def _actor(self, required: bool = False) -> str:
        actor = self.headers.get("X-Flowforge-Actor", "")
        if required and not actor:
            raise _HttpError(401, "UNAUTHENTICATED", "X-Flowforge-Actor header required")
        return actor or "anonymous"

    def _require_steer(self) -> str:
        actor = self._actor(required=True)
        if self.app.permission_for(actor) != "steer":
            raise _HttpError(403, "FORBIDDEN", f"actor {actor} lacks steer permission")
        return actor

    def _query(self) -> dict[str, str]:
        return {k: v[0] for k, v in parse_qs(urlparse(self.path).query).items()}

    def _param(self, q: dict, name: str, cast=str):
        if name not in q:
            raise _HttpError(400, "BAD_REQUEST", f"missing query parameter: {name}")
        try:
            return cast(q[name])
        except ValueError:
            raise _HttpError(400, "BAD_REQUEST", f"bad value for {name}: {q[name]}")

    # -- dispatch ------------------------------------------------------------------

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def _dispatch(self, method: str):
        path = urlparse(self.path).path
        try:
            handler = self._route(method, path)
            if handler is None:
                raise _HttpError(404, "NOT_FOUND", path)
            handler()
        except _HttpError as e:
            self._send_error_envelope(e.status, e.code, e.detail, e.extra)
        except KeyError as e:
            self._send_error_envelope(400, "BAD_REQUEST", f"missing field: {e}")
        except GateBlocked as e:
            self._send_error_envelope(409, e.code, e.detail, {"gate": e.report})
        except FlowforgeError as e:
            self._send_error_envelope(_STATUS_BY_CODE.get(e.code, 500), e.code, e.detail)
        except (BrokenPipeError, ConnectionResetError):
            pass
        except Exception as e:  # surface engine bugs as 500s, not dropped sockets
            try:
                self._send_error_envelope(500, "INTERNAL", f"{type(e).__name__}: {e}")
            except Exception:
                pass

    def _route(self, method: str, path: str):
        routes = [
            ("GET", r"^/api/v1/runs$", self._get_runs),
            ("GET", r"^/api/v1/runs/([^/]+)$", self._get_run),
            ("GET", r"^/api/v1/runs/([^/]+)/events$", self._get_events),
            ("POST", r"^/api/v1/runs/([^/]+)/control$", self._post_control),
            ("POST", r"^/api/v1/runs$", self._post_run),
            ("GET", r"^/api/v1/workflows$", self._get_workflows),
            ("POST", r"^/api/v1/workflows$", self._post_workflow),
            ("GET", r"^/api/v1/predict$", self._get_predict),
            ("GET", r"^/api/v1/recommend$", self._get_recommend),
            ("GET", r"^/api/v1/advise_workers$", self._get_advise),
            ("GET", r"^/api/v1/metrics$", self._get_metrics),
            ("GET", r"^/api/v1/resources$", self._get_resources),
            ("GET", r"^/api/v1/ppods/state$", self._get_ppods_state),
            ("POST", r"^/api/v1/ppods/(report|advance|target|testcase)$", self._post_ppods),
        ]
        for m, pattern, fn in routes:
            if m != method:
                continue
            match = re.match(pattern, path)
            if match:
                args = match.groups()
                return lambda: fn(*args)
        return None

    # -- runs ---------------------------------------------------------------------------

    def _get_runs(self):
        self._send_json(200, {"runs": [h.to_dict() for h in self.app.engine.list_runs()]})

    def _get_run(self, run_id: str):
        self._send_json(200, self.app.run_view(run_id))

    def _post_workflow(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        try:
            spec = parse_workflow(raw.decode("utf-8"))
        except (WorkflowSyntaxError, SchemaError) as e:
            raise _HttpError(400, e.code, e.detail)
        self.app.register_workflow(spec)
        self._send_json(201, {"id": spec.id, "version": spec.version})

    def _get_workflows(self):
        self._send_json(200, {"workflows": [
            {"id": s.id, "version": s.version, "steps": [st.id for st in s.steps]}
            for s in self.app.workflows()]})

    def _post_run(self):
        body = self._read_body()
        workflow_id = body.get("workflow_id")
        spec = self.app.get_workflow(workflow_id or "")
        if spec is None:
            raise _HttpError(404, "UNKNOWN_WORKFLOW", f"workflow {workflow_id!r} not registered")
        mode = body.get("mode", "exploratory")
        actor = self._require_steer() if mode == "scaled" or body.get("override_gate") \
            else self._actor()
        payloads = [json.dumps(m, sort_keys=True, separators=(",", ":")).encode()
                    for m in body.get("source_messages", [])]
        handle = self.app.engine.start_run(
            spec, mode=mode, worker_counts=body.get("worker_counts") or {},
            source_messages=payloads, params=body.get("params") or None,
            actor=actor, override_gate=bool(body.get("override_gate", False)))
        self._send_json(201, handle.to_dict())

    def _post_control(self, run_id: str):
        actor = self._require_steer()
        body = self._read_body()
        action = body.get("action")
        if not action:
            raise _HttpError(400, "BAD_REQUEST", "missing action")
        handle = self.app.engine.control_run(run_id, action, step=body.get("step"),
                                             n=body.get("n"), actor=actor)
        self._send_json(202, handle.to_dict())

    # -- event stream --------------------------------------------------------------------

    def _get_events(self, run_id: str):
        q = self._query()
        last = self.headers.get("Last-Event-ID") or q.get("last_event_id")
        try:
            from_seq = int(last) + 1 if last else 1
        except ValueError:
            raise _HttpError(400, "BAD_REQUEST", f"bad Last-Event-ID: {last}")
        try:
            sub = self.app.store.subscribe_events(run_id, from_seq=from_seq)
        except UnknownRun as e:
            raise _HttpError(404, e.code, str(e))
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream; charset=utf-8")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Connection", "close")
        self.end_headers()
        stopping: threading.Event = self.server.stopping  # type: ignore[attr-defined]
        try:
            while not stopping.is_set():
                ev = sub.get(timeout=0.5)
                if ev is None:
                    self.wfile.write(b": keepalive\n\n")
                    self.wfile.flush()
                    continue
                data = json.dumps(ev.to_dict())
                frame = f"id: {ev.seq}\nevent: {ev.kind}\ndata: {data}\n\n"
                self.wfile.write(frame.encode())
                self.wfile.flush()
                if ev.kind == "RunCompleted":
                    break
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            sub.close()

    # -- analytics ---------------------------------------------------------------------------

    def _get_predict(self):
        q = self._query()
        out = self.app.smartflows.predict_runtime(
            self._param(q, "step"), self._param(q, "class"),
            self._param(q, "input_bytes", float))
        self._send_json(200, out)

    def _get_recommend(self):
        q = self._query()
        rec = self.app.smartflows.select_resource(
            self._param(q, "step"), self._param(q, "input_bytes", float),
            self._param(q, "deadline_s", float))
        self._send_json(200, rec.to_dict())

    def _get_advise(self):
        q = self._query()
        workers = self.app.smartflows.advise_workers(
            self._param(q, "step"), self._param(q, "class"),
            self._param(q, "pending", int), self._param(q, "deadline_s", float))
        self._send_json(200, {"workers": workers})

    def _get_metrics(self):
        q = self._query()
        step = self._param(q, "step")
        metric = q.get("metric", "runtime_s")
        self._send_json(200, {"step": step, "metric": metric,
                              "summary": self.app.store.summarize_step(step, metric)})

    def _get_resources(self):
        self._send_json(200, {"resources": [rc.to_dict() for rc in self.app.catalog.classes()]})

    # -- ppods -----------------------------------------------------------------------------------

    def _get_ppods_state(self):
        self._send_json(200, self.app.ppods.state())

    def _post_ppods(self, op: str):
        actor = self._require_steer()
        body = self._read_body()
        ppods = self.app.ppods
        if op == "report":
            state = ppods.submit_report(body.get("member", actor), body.get("status", ""),
                                        body.get("text", ""))
        elif op == "advance":
            state = ppods.advance_phase(body.get("decision"), body.get("text", ""))
        elif op == "target":
            state = ppods.define_target(
                id=body["id"], step_id=body["step_id"], metric=body["metric"],
                comparator=body["comparator"], threshold=float(body["threshold"]),
                epsilon_pct=float(body.get("epsilon_pct", 0.0)),
                unit=body.get("unit", ""), rationale=body.get("rationale", ""))
        else:
            state = ppods.define_testcase(
                id=body["id"], step_id=body["step_id"],
                fixture_payloads=body.get("fixture_payloads", []),
                target_ids=body.get("target_ids", []))
        self._send_json(200, state)


class Gateway:
    def __init__(self, app: FlowforgeApp, host: str = "127.0.0.1", port: int = 7600):
        self.app = app
        self.server = ThreadingHTTPServer((host, port), _Handler)
        self.server.daemon_threads = True
        self.server.app = app  # type: ignore[attr-defined]
        self.server.stopping = threading.Event()  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def addr(self) -> str:
        host, port = self.server.server_address[:2]
        return f"{host}:{port}"

    def start(self):
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True,
                                        name="gateway")
        self._thread.start()

    def stop(self):
        self.server.stopping.set()  # type: ignore[attr-defined]
        self.server.shutdown()
        self.server.server_close()
        if self._thread:
            self._thread.join(timeout=5)
