"""Operator command line: validate, run, metrics/predict/recommend/advise,
the ppods cycle, and `serve`.

Commands talk HTTP to a running `flowforge serve` (FLOWFORGE_HTTP_ADDR) by
default; `--local` embeds the engine against FLOWFORGE_DATA_DIR instead, so
tests and single-user work need no daemon. Exit codes: 0 success, 1 domain
failure, 2 IO error, 64 usage error; `--json` commands print exactly one
JSON document on stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading

import requests

from . import adapters, config
from .app import FlowforgeApp
from .errors import FlowforgeError, GateBlocked, NoData
from .model import parse_workflow, validate_dag

EX_OK = 0
EX_FAIL = 1
EX_IO = 2
EX_USAGE = 64

_TERMINAL_EXITS = {"Completed": 0, "Failed": 1, "Cancelled": 130}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EX_USAGE)


def _log(msg: str):
    print(msg, file=sys.stderr)


def _emit(doc, as_json: bool, text: str | None = None):
    if as_json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    elif text is not None:
        print(text)


def _read_file(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as e:
        _log(f"cannot read {path}: {e}")
        raise SystemExit(EX_IO)


def _read_payloads(path: str | None) -> list:
    if path is None:
        return []
    text = sys.stdin.read() if path == "-" else _read_file(path)
    payloads = []
    for i, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            payloads.append(json.loads(line))
        except json.JSONDecodeError as e:
            _log(f"{path}:{i}: not JSON: {e}")
            raise SystemExit(EX_IO)
    return payloads


def _parse_workers(items: list[str]) -> dict[str, int]:
    counts = {}
    for item in items:
        step, _, n = item.partition("=")
        try:
            value = int(n)
        except ValueError:
            value = 0
        if not step or value < 1:
            _log(f"bad --workers value: {item!r} (want step=N with N >= 1)")
            raise SystemExit(EX_USAGE)
        counts[step] = value
    return counts


def _actor() -> str:
    return os.environ.get("FLOWFORGE_ACTOR", "cli")


class _Remote:
    """Thin wrapper over the gateway API with CLI-friendly errors."""

    def __init__(self, addr: str):
        self.base = f"http://{addr}/api/v1"

    def _check(self, r: requests.Response) -> dict:
        if r.status_code >= 400:
            try:
                body = r.json()
            except ValueError:
                body = {"code": str(r.status_code), "detail": r.text}
            raise _RemoteError(body.get("code", "ERROR"), body.get("detail", ""), body)
        return r.json()

    def get(self, path: str) -> dict:
        try:
            return self._check(requests.get(self.base + path, timeout=30))
        except requests.ConnectionError as e:
            _log(f"cannot reach gateway at {self.base}: {e}")
            raise SystemExit(EX_IO)

    def post(self, path: str, body: dict | None = None, raw: str | None = None) -> dict:
        headers = {"X-Flowforge-Actor": _actor()}
        try:
            if raw is not None:
                r = requests.post(self.base + path, data=raw.encode(), headers=headers,
                                  timeout=30)
            else:
                r = requests.post(self.base + path, json=body or {}, headers=headers,
                                  timeout=30)
        except requests.ConnectionError as e:
            _log(f"cannot reach gateway at {self.base}: {e}")
            raise SystemExit(EX_IO)
        return self._check(r)

    def stream_events(self, run_id: str, from_seq: int = 1):
        url = f"{self.base}/runs/{run_id}/events"
        headers = {"Last-Event-ID": str(from_seq - 1)} if from_seq > 1 else {}
        with requests.get(url, stream=True, headers=headers, timeout=300) as r:
            self._check_stream(r)
            cur: dict = {}
            for line in r.iter_lines(decode_unicode=True):
                if line == "":
                    if "data" in cur:
                        yield json.loads(cur["data"])
                        if cur.get("event") == "RunCompleted":
                            return
                    cur = {}
                elif line and not line.startswith(":"):
                    field, _, value = line.partition(":")
                    cur[field] = value.strip()

    def _check_stream(self, r):
        if r.status_code >= 400:
            raise _RemoteError("STREAM", f"HTTP {r.status_code}", {})


class _RemoteError(FlowforgeError):
    def __init__(self, code: str, detail: str, body: dict):
        super().__init__(detail)
        self.code = code
        self.body = body


def _render_event(ev: dict) -> str:
    body = ev.get("body", {})
    kind = ev.get("kind")
    if kind == "TaskStateChanged":
        extra = f"{body.get('step_id')}#{body.get('attempt')} -> {body.get('state')}"
    elif kind == "SteeringEvent":
        extra = f"{body.get('action')} by {body.get('actor')}"
    elif kind == "MetricFlushed":
        extra = f"{body.get('step_id')} {body.get('metrics')}"
    else:
        extra = json.dumps({k: v for k, v in body.items() if k != "run_id"},
                           sort_keys=True)
    return f"[{ev.get('seq'):>4}] {kind:<18} {extra}"


# -- commands -----------------------------------------------------------------------


def cmd_validate(args) -> int:
    text = _read_file(args.file)
    try:
        spec = parse_workflow(text)
    except FlowforgeError as e:
        _emit({"ok": False, "violations": [f"{e.code}: {e.detail}"]}, args.json,
              f"{e.code}: {e.detail}")
        return EX_FAIL
    report = validate_dag(spec, builtins=adapters.builtin_names())
    if report.ok:
        _emit({"ok": True, "violations": []}, args.json, "ok")
        return EX_OK
    _emit({"ok": False, "violations": list(report.violations)}, args.json,
          "\n".join(report.violations))
    return EX_FAIL


def _local_app(args, record_trail=True) -> FlowforgeApp:
    return FlowforgeApp(config.data_dir(), record_trail=record_trail)


def cmd_run(args) -> int:
    text = _read_file(args.file)
    try:
        spec = parse_workflow(text)
    except FlowforgeError as e:
        _log(f"{e.code}: {e.detail}")
        return EX_FAIL
    workers = _parse_workers(args.workers or [])
    payloads = _read_payloads(args.input)
    params = dict(kv.split("=", 1) for kv in (args.param or []))

    if args.local:
        app = _local_app(args)
        try:
            app.register_workflow(spec)
            handle = app.engine.start_run(
                spec, mode=args.mode, worker_counts=workers,
                source_messages=[json.dumps(p, sort_keys=True, separators=(",", ":")).encode()
                                 for p in payloads],
                params=params or None, actor=_actor(), override_gate=args.override_gate)
            run_id = handle.run_id
            _log(f"run {run_id} started ({args.mode})")
            if args.watch:
                sub = app.store.subscribe_events(run_id, from_seq=1)
                for ev in sub:
                    print(_render_event(ev.to_dict()))
                    if ev.kind == "RunCompleted":
                        break
                sub.close()
            final = app.engine.wait(run_id, timeout=args.timeout)
            doc = app.run_view(run_id)
            _emit(doc, args.json, f"run {run_id}: {final.status.value}")
            return _TERMINAL_EXITS.get(final.status.value, EX_FAIL)
        except GateBlocked as e:
            _log("gate blocked:")
            for b in e.report.get("blocking", []):
                _log(f"  - {b}")
            return EX_FAIL
        except FlowforgeError as e:
            _log(f"{e.code}: {e.detail}")
            return EX_FAIL
        finally:
            app.shutdown(timeout_s=5)

    remote = _Remote(config.http_addr())
    try:
        remote.post("/workflows", raw=text)
        handle = remote.post("/runs", {
            "workflow_id": spec.id, "mode": args.mode, "worker_counts": workers,
            "source_messages": payloads, "params": params,
            "override_gate": args.override_gate,
        })
    except _RemoteError as e:
        if e.code == "GATE_BLOCKED":
            _log("gate blocked:")
            for b in e.body.get("gate", {}).get("blocking", []):
                _log(f"  - {b}")
        else:
            _log(f"{e.code}: {e.detail}")
        return EX_FAIL
    run_id = handle["run_id"]
    _log(f"run {run_id} started ({args.mode})")
    final_status = None
    if args.watch:
        for ev in remote.stream_events(run_id):
            print(_render_event(ev))
            if ev.get("kind") == "RunCompleted":
                final_status = ev["body"].get("status")
    while final_status is None:
        view = remote.get(f"/runs/{run_id}")
        if view["status"] in _TERMINAL_EXITS:
            final_status = view["status"]
        else:
            import time as _t
            _t.sleep(0.05)
    doc = remote.get(f"/runs/{run_id}")
    _emit(doc, args.json, f"run {run_id}: {final_status}")
    return _TERMINAL_EXITS.get(final_status, EX_FAIL)


def _analytics_command(args, local_fn, remote_path: str, render) -> int:
    try:
        if args.local:
            app = _local_app(args, record_trail=False)
            try:
                doc = local_fn(app)
            finally:
                app.shutdown(timeout_s=2)
        else:
            doc = _Remote(config.http_addr()).get(remote_path)
    except (FlowforgeError, NoData) as e:
        if args.json:
            print(json.dumps({"ok": False, "code": e.code, "detail": e.detail}))
        else:
            _log(f"{e.code}: {e.detail}")
        return EX_FAIL
    _emit(doc, args.json, render(doc))
    return EX_OK


def cmd_metrics(args) -> int:
    def local(app):
        return {"step": args.step, "metric": args.metric,
                "summary": app.store.summarize_step(args.step, args.metric)}

    def render(doc):
        s = doc["summary"]
        header = f"{'metric':<14} {'n':>5} {'mean':>10} {'stddev':>10} {'min':>10} {'p50':>10} {'p95':>10} {'max':>10}"
        row = (f"{doc['metric']:<14} {s['n']:>5} {s['mean']:>10.4f} {s['stddev']:>10.4f} "
               f"{s['min']:>10.4f} {s['p50']:>10.4f} {s['p95']:>10.4f} {s['max']:>10.4f}")
        return header + "\n" + row

    return _analytics_command(
        args, local, f"/metrics?step={args.step}&metric={args.metric}", render)


def cmd_predict(args) -> int:
    def local(app):
        return app.smartflows.predict_runtime(args.step, args.resource_class, args.bytes)

    def render(doc):
        return f"{doc['estimate_s']:.3f}s ± {doc['stddev_s']:.3f}s ({doc.get('kind', 'ridge')})"

    return _analytics_command(
        args, local,
        f"/predict?step={args.step}&class={args.resource_class}&input_bytes={args.bytes}",
        render)


def cmd_recommend(args) -> int:
    def local(app):
        return app.smartflows.select_resource(args.step, args.bytes, args.deadline).to_dict()

    def render(doc):
        line = f"{doc['resource_class']} {doc['predicted_runtime_s']:.1f}s ${doc['predicted_cost']:.2f}"
        if not doc["feasible"]:
            line += " (infeasible)"
        return line

    return _analytics_command(
        args, local,
        f"/recommend?step={args.step}&input_bytes={args.bytes}&deadline_s={args.deadline}",
        render)


def cmd_advise(args) -> int:
    def local(app):
        return {"workers": app.smartflows.advise_workers(
            args.step, args.resource_class, args.pending, args.deadline)}

    return _analytics_command(
        args, local,
        f"/advise_workers?step={args.step}&class={args.resource_class}"
        f"&pending={args.pending}&deadline_s={args.deadline}",
        lambda doc: str(doc["workers"]))


def cmd_ppods(args) -> int:
    app = _local_app(args, record_trail=False)
    try:
        ppods = app.ppods
        if args.ppods_cmd == "init":
            spec = parse_workflow(_read_file(args.file))
            state = ppods.init(spec)
            _emit(state, args.json, f"ledger initialized for {spec.id} (phase {state['phase_name']})")
            return EX_OK
        if args.ppods_cmd == "target":
            state = ppods.define_target(
                id=args.id, step_id=args.step, metric=args.metric,
                comparator=args.comparator, threshold=args.threshold,
                epsilon_pct=args.epsilon, unit=args.unit, rationale=args.rationale)
            _emit(state, args.json, f"target {args.id} recorded")
            return EX_OK
        if args.ppods_cmd == "testcase":
            fixtures = _read_payloads(args.fixture)
            state = ppods.define_testcase(
                id=args.id, step_id=args.step, fixture_payloads=fixtures,
                target_ids=args.targets.split(","))
            _emit(state, args.json, f"test case {args.id} recorded")
            return EX_OK
        if args.ppods_cmd == "test":
            result = ppods.run_testcase(args.id)
            doc = {"case_id": result.case_id, "passed": result.passed,
                   "task_outcome": result.task_outcome, "per_target": result.per_target,
                   "reason": result.reason}
            lines = [f"case {result.case_id}: {'PASS' if result.passed else 'FAIL'}"]
            for tid, r in sorted(result.per_target.items()):
                measured = "n/a" if r["measured"] is None else f"{r['measured']:.6g}"
                lines.append(f"  {tid}: {'pass' if r['passed'] else 'fail'} (measured {measured})")
            _emit(doc, args.json, "\n".join(lines))
            return EX_OK if result.passed else EX_FAIL
        if args.ppods_cmd == "report":
            state = ppods.submit_report(args.member, args.status, args.text)
            _emit(state, args.json, f"report from {args.member} recorded")
            return EX_OK
        if args.ppods_cmd == "advance":
            state = ppods.advance_phase(args.decision, args.text)
            _emit(state, args.json,
                  f"phase -> {state['phase_name']} (iteration {state['iteration']})")
            return EX_OK
        if args.ppods_cmd == "gate":
            gate = ppods.check_gate()
            text = "ready" if gate["ready"] else "blocked:\n" + "\n".join(
                f"  - {b}" for b in gate["blocking"])
            _emit(gate, args.json, text)
            return EX_OK if gate["ready"] else EX_FAIL
        raise SystemExit(EX_USAGE)
    except FlowforgeError as e:
        if args.json:
            print(json.dumps({"ok": False, "code": e.code, "detail": e.detail}))
        else:
            _log(f"{e.code}: {e.detail}")
        return EX_FAIL
    finally:
        app.shutdown(timeout_s=2)


def cmd_serve(args) -> int:
    from .gateway import Gateway
    from .wire import BrokerServer

    http_host, http_port = config.parse_addr(args.http or config.http_addr())
    broker_host, broker_port = config.parse_addr(args.broker or config.broker_addr())
    app = FlowforgeApp(config.data_dir(), broker_addr=f"{broker_host}:{broker_port}")
    try:
        broker_srv = BrokerServer(app.broker, host=broker_host, port=broker_port)
        gateway = Gateway(app, host=http_host, port=http_port)
    except OSError as e:
        _log(f"bind failed: {e}")
        app.shutdown(timeout_s=2)
        return EX_FAIL
    broker_srv.start()
    gateway.start()
    _log(f"flowforge serving: http {gateway.addr}, broker {broker_srv.addr}, "
         f"data {config.data_dir()}")

    stop = threading.Event()

    def _signal(_sig, _frame):
        stop.set()

    signal.signal(signal.SIGINT, _signal)
    signal.signal(signal.SIGTERM, _signal)
    stop.wait()
    _log("shutting down: draining in-flight tasks")
    gateway.stop()
    broker_srv.stop()
    app.shutdown(timeout_s=30.0)
    return EX_OK


def build_parser() -> _Parser:
    p = _Parser(prog="flowforge", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def add_json(sp):
        sp.add_argument("--json", action="store_true", help="emit one JSON document on stdout")

    sp = sub.add_parser("validate", help="validate a workflow file")
    sp.add_argument("file")
    add_json(sp)
    sp.set_defaults(fn=cmd_validate)

    sp = sub.add_parser("run", help="run a workflow")
    sp.add_argument("file")
    sp.add_argument("--mode", choices=("exploratory", "scaled"), default="exploratory")
    sp.add_argument("--workers", action="append", metavar="step=N")
    sp.add_argument("--input", help="NDJSON file of source messages ('-' for stdin)")
    sp.add_argument("--param", action="append", metavar="key=value")
    sp.add_argument("--override-gate", action="store_true")
    sp.add_argument("--watch", action="store_true", help="tail the event stream")
    sp.add_argument("--local", action="store_true", help="embedded engine, no daemon")
    sp.add_argument("--timeout", type=float, default=3600.0)
    add_json(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("metrics", help="summarize a step metric")
    sp.add_argument("step")
    sp.add_argument("--metric", default="runtime_s")
    sp.add_argument("--local", action="store_true")
    add_json(sp)
    sp.set_defaults(fn=cmd_metrics)

    sp = sub.add_parser("predict", help="predict step runtime")
    sp.add_argument("step")
    sp.add_argument("--class", dest="resource_class", required=True)
    sp.add_argument("--bytes", type=float, required=True)
    sp.add_argument("--local", action="store_true")
    add_json(sp)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("recommend", help="pick the cheapest feasible resource class")
    sp.add_argument("step")
    sp.add_argument("--bytes", type=float, required=True)
    sp.add_argument("--deadline", type=float, required=True)
    sp.add_argument("--local", action="store_true")
    add_json(sp)
    sp.set_defaults(fn=cmd_recommend)

    sp = sub.add_parser("advise", help="advise a worker count")
    sp.add_argument("step")
    sp.add_argument("--class", dest="resource_class", required=True)
    sp.add_argument("--pending", type=int, required=True)
    sp.add_argument("--deadline", type=float, required=True)
    sp.add_argument("--local", action="store_true")
    add_json(sp)
    sp.set_defaults(fn=cmd_advise)

    sp = sub.add_parser("ppods", help="drive the team iteration ledger")
    ppods_sub = sp.add_subparsers(dest="ppods_cmd", required=True)

    q = ppods_sub.add_parser("init")
    q.add_argument("file")
    add_json(q)
    q = ppods_sub.add_parser("target")
    q.add_argument("--id", required=True)
    q.add_argument("--step", required=True)
    q.add_argument("--metric", required=True)
    q.add_argument("--comparator", required=True, choices=("<=", ">=", "within_pct"))
    q.add_argument("--threshold", type=float, required=True)
    q.add_argument("--epsilon", type=float, default=0.0)
    q.add_argument("--unit", default="")
    q.add_argument("--rationale", default="")
    add_json(q)
    q = ppods_sub.add_parser("testcase")
    q.add_argument("--id", required=True)
    q.add_argument("--step", required=True)
    q.add_argument("--fixture", required=True, help="NDJSON file of fixture payloads")
    q.add_argument("--targets", required=True, help="comma-separated target ids")
    add_json(q)
    q = ppods_sub.add_parser("test")
    q.add_argument("id")
    add_json(q)
    q = ppods_sub.add_parser("report")
    q.add_argument("--member", required=True)
    q.add_argument("--status", required=True, choices=("success", "concern"))
    q.add_argument("--text", default="")
    add_json(q)
    q = ppods_sub.add_parser("advance")
    q.add_argument("--decision", choices=("iterate", "scale_ready"))
    q.add_argument("--text", default="")
    add_json(q)
    q = ppods_sub.add_parser("gate")
    add_json(q)
    sp.set_defaults(fn=cmd_ppods)

    sp = sub.add_parser("serve", help="run broker + gateway + engine until signaled")
    sp.add_argument("--http")
    sp.add_argument("--broker")
    sp.set_defaults(fn=cmd_serve)

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit as e:
        return int(e.code or 0)
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
