from __future__ import annotations

import json
import time

import pytest
import requests

from flowforge.app import FlowforgeApp
from flowforge.gateway import Gateway
from flowforge.smartflows import PredictionModel
from flowforge.resources import Catalog, ResourceClass

from conftest import FIG3_DOC

CATALOG = Catalog([
    ResourceClass(id="local", cost_per_second=0.0),
    ResourceClass(id="small", cost_per_second=0.10),
    ResourceClass(id="large", cost_per_second=0.50),
])


@pytest.fixture
def gw(tmp_path):
    app = FlowforgeApp(tmp_path, catalog=CATALOG, record_trail=False,
                       actors={"alice": "steer", "bob": "read"})
    gateway = Gateway(app, port=0)
    gateway.start()
    yield gateway
    gateway.stop()
    app.shutdown(timeout_s=5)


def _url(gw: Gateway, path: str) -> str:
    return f"http://{gw.addr}{path}"


def _post(gw, path, body=None, actor=None, raw=None):
    headers = {"X-Flowforge-Actor": actor} if actor else {}
    if raw is not None:
        return requests.post(_url(gw, path), data=raw, headers=headers, timeout=10)
    return requests.post(_url(gw, path), json=body or {}, headers=headers, timeout=10)


def _get(gw, path, **kw):
    return requests.get(_url(gw, path), timeout=10, **kw)


def _register_fig3(gw):
    r = _post(gw, "/api/v1/workflows", raw=json.dumps(FIG3_DOC))
    assert r.status_code == 201, r.text
    return r.json()


def _start_run(gw, source=({"x": 1},), mode="exploratory", actor="alice", **kw):
    body = {"workflow_id": FIG3_DOC["id"], "mode": mode,
            "source_messages": list(source), **kw}
    return _post(gw, "/api/v1/runs", body, actor=actor)


def _wait_run(gw, run_id, timeout=20.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        r = _get(gw, f"/api/v1/runs/{run_id}").json()
        if r["status"] in ("Completed", "Failed", "Cancelled"):
            return r
        time.sleep(0.02)
    raise TimeoutError("run did not finish")


def read_sse(gw, run_id, last_event_id=None, max_events=10_000, stop_on_complete=True):
    """Collect (seq, kind, body) frames from the event stream."""
    headers = {}
    if last_event_id is not None:
        headers["Last-Event-ID"] = str(last_event_id)
    events = []
    with requests.get(_url(gw, f"/api/v1/runs/{run_id}/events"), stream=True,
                      headers=headers, timeout=30) as r:
        assert r.status_code == 200
        assert r.headers["Content-Type"].startswith("text/event-stream")
        cur: dict = {}
        for line in r.iter_lines(decode_unicode=True):
            if line is None:
                continue
            if line == "":
                if "data" in cur:
                    events.append(cur)
                    if len(events) >= max_events or (
                            stop_on_complete and cur.get("event") == "RunCompleted"):
                        return events
                cur = {}
                continue
            if line.startswith(":"):
                continue
            field, _, value = line.partition(":")
            cur[field] = value.strip()
    return events


def test_workflow_and_run_lifecycle(gw):
    _register_fig3(gw)
    r = _start_run(gw)
    assert r.status_code == 201
    handle = r.json()
    assert handle["status"] == "Running"
    assert handle["mode"] == "exploratory"
    final = _wait_run(gw, handle["run_id"])
    assert final["status"] == "Completed"
    assert final["results_count"] == 1
    assert final["task_counts"]["data-analysis"]["Succeeded"] == 1
    listing = _get(gw, "/api/v1/runs").json()["runs"]
    assert any(h["run_id"] == handle["run_id"] for h in listing)


def test_get_unknown_run_404(gw):
    r = _get(gw, "/api/v1/runs/r-nope")
    assert r.status_code == 404
    assert r.json() == {"ok": False, "code": "UNKNOWN_RUN", "detail": "r-nope"}


def test_post_run_unknown_workflow_404(gw):
    r = _post(gw, "/api/v1/runs", {"workflow_id": "ghost"}, actor="alice")
    assert r.status_code == 404
    assert r.json()["code"] == "UNKNOWN_WORKFLOW"


def test_post_workflow_invalid_400(gw):
    r = _post(gw, "/api/v1/workflows", raw="{nope")
    assert r.status_code == 400 and r.json()["code"] == "SYNTAX"
    r = _post(gw, "/api/v1/workflows", raw=json.dumps({"id": "x"}))
    assert r.status_code == 400 and r.json()["code"] == "SCHEMA"


def test_scaled_run_gate_blocked_409(gw):
    _register_fig3(gw)
    gw.app.ppods.init(gw.app.get_workflow(FIG3_DOC["id"]))  # ledger exists, not ready
    r = _start_run(gw, mode="scaled", worker_counts={"data-analysis": 2})
    assert r.status_code == 409
    body = r.json()
    assert body["code"] == "GATE_BLOCKED"
    assert "no scale_ready consensus" in body["gate"]["blocking"]
    # override with audit works
    r = _start_run(gw, mode="scaled", worker_counts={"data-analysis": 2},
                   override_gate=True)
    assert r.status_code == 201
    _wait_run(gw, r.json()["run_id"])


def test_sse_full_history_then_close(gw):
    _register_fig3(gw)
    run_id = _start_run(gw).json()["run_id"]
    _wait_run(gw, run_id)
    events = read_sse(gw, run_id)
    seqs = [int(e["id"]) for e in events]
    assert seqs == list(range(1, len(seqs) + 1))
    assert events[0]["event"] == "RunStarted"
    assert events[-1]["event"] == "RunCompleted"
    payloads = [json.loads(e["data"]) for e in events]
    assert payloads[0]["seq"] == 1


def test_sse_resume_from_last_event_id(gw):
    _register_fig3(gw)
    run_id = _start_run(gw).json()["run_id"]
    _wait_run(gw, run_id)
    full = read_sse(gw, run_id)
    k = 3
    resumed = read_sse(gw, run_id, last_event_id=k)
    assert int(resumed[0]["id"]) == k + 1
    assert [e["id"] for e in resumed] == [e["id"] for e in full[k:]]


def test_sse_live_stream_sees_steering(gw):
    _register_fig3(gw)
    run_id = _start_run(gw, source=[{"i": i} for i in range(30)]).json()["run_id"]
    r = _post(gw, f"/api/v1/runs/{run_id}/control", {"action": "pause"}, actor="alice")
    assert r.status_code == 202 and r.json()["status"] == "Paused"
    _post(gw, f"/api/v1/runs/{run_id}/control", {"action": "resume"}, actor="alice")
    _wait_run(gw, run_id)
    events = read_sse(gw, run_id)
    kinds = [e["event"] for e in events]
    assert kinds.count("SteeringEvent") == 2
    seqs = [int(e["id"]) for e in events]
    assert seqs == sorted(seqs)


def test_control_permissions(gw):
    _register_fig3(gw)
    run_id = _start_run(gw, source=[{"i": i} for i in range(50)]).json()["run_id"]
    r = _post(gw, f"/api/v1/runs/{run_id}/control", {"action": "pause"})
    assert r.status_code == 401
    r = _post(gw, f"/api/v1/runs/{run_id}/control", {"action": "pause"}, actor="bob")
    assert r.status_code == 403
    r = _post(gw, f"/api/v1/runs/{run_id}/control", {"action": "pause"}, actor="alice")
    assert r.status_code == 202
    _post(gw, f"/api/v1/runs/{run_id}/control", {"action": "resume"}, actor="alice")
    _wait_run(gw, run_id)
    r = _post(gw, f"/api/v1/runs/{run_id}/control", {"action": "resume"}, actor="alice")
    assert r.status_code == 409 and r.json()["code"] == "INVALID_TRANSITION"


def test_steering_event_logged_before_response(gw):
    _register_fig3(gw)
    run_id = _start_run(gw, source=[{"i": i} for i in range(50)]).json()["run_id"]
    r = _post(gw, f"/api/v1/runs/{run_id}/control", {"action": "pause"}, actor="alice")
    assert r.status_code == 202
    kinds = [e.kind for e in gw.app.store.events(run_id)]  # read-your-writes
    assert "SteeringEvent" in kinds
    _post(gw, f"/api/v1/runs/{run_id}/control", {"action": "cancel"}, actor="alice")
    _wait_run(gw, run_id)


def test_predict_no_data_404(gw):
    r = _get(gw, "/api/v1/predict?step=ghost&class=local&input_bytes=100")
    assert r.status_code == 404
    assert r.json()["code"] == "NO_DATA"


def test_recommend_two_class_example(gw):
    for rc_id, est in (("small", 100.0), ("large", 30.0)):
        gw.app.smartflows.import_model(PredictionModel(
            step_id="data-analysis", resource_class=rc_id, kind="ridge",
            weights=(est, 0.0, 0.0), n_train=5))
    r = _get(gw, "/api/v1/recommend?step=data-analysis&input_bytes=1000000&deadline_s=60")
    body = r.json()
    assert body["resource_class"] == "large"
    assert body["predicted_cost"] == pytest.approx(15.0)
    assert body["feasible"] is True
    assert [a["resource_class"] for a in body["alternatives"]][0] == "large"


def test_advise_endpoint(gw):
    gw.app.smartflows.import_model(PredictionModel(
        step_id="s", resource_class="local", kind="ridge", weights=(0.6, 0, 0),
        n_train=5, train_bytes_mean=100.0))
    r = _get(gw, "/api/v1/advise_workers?step=s&class=local&pending=1000&deadline_s=120")
    assert r.json() == {"workers": 7}


def test_ppods_endpoints(gw):
    _register_fig3(gw)
    gw.app.ppods.init(gw.app.get_workflow(FIG3_DOC["id"]))
    state = _get(gw, "/api/v1/ppods/state").json()
    assert state["phase_name"] == "DECOMPOSE"
    r = _post(gw, "/api/v1/ppods/advance", {}, actor="alice")
    assert r.status_code == 200 and r.json()["phase_name"] == "AGREE_METRICS"
    r = _post(gw, "/api/v1/ppods/target", {
        "id": "t1", "step_id": "data-analysis", "metric": "runtime_s",
        "comparator": "<=", "threshold": 5.0}, actor="alice")
    assert r.status_code == 200
    r = _post(gw, "/api/v1/ppods/testcase", {
        "id": "c1", "step_id": "data-analysis", "fixture_payloads": [{}],
        "target_ids": ["t1"]}, actor="alice")
    assert r.status_code == 200
    _post(gw, "/api/v1/ppods/advance", {}, actor="alice")   # DEVELOP
    _post(gw, "/api/v1/ppods/advance", {}, actor="alice")   # REPORT
    r = _post(gw, "/api/v1/ppods/advance", {}, actor="alice")
    assert r.status_code == 409 and r.json()["code"] == "MISSING_REPORTS"
    r = _post(gw, "/api/v1/ppods/target", {
        "id": "t2", "step_id": "data-analysis", "metric": "runtime_s",
        "comparator": "<=", "threshold": 1.0}, actor="alice")
    assert r.status_code == 409 and r.json()["code"] == "WRONG_PHASE"
    r = _post(gw, "/api/v1/ppods/report", {"member": "m-data-eng", "status": "success"},
              actor="alice")
    assert r.status_code == 200
    # read-only actors cannot mutate ppods state
    r = _post(gw, "/api/v1/ppods/report", {"member": "m-data-sci", "status": "success"},
              actor="bob")
    assert r.status_code == 403


def test_metrics_and_resources_endpoints(gw):
    _register_fig3(gw)
    run_id = _start_run(gw).json()["run_id"]
    _wait_run(gw, run_id)
    r = _get(gw, "/api/v1/metrics?step=data-analysis&metric=runtime_s")
    body = r.json()
    assert body["summary"]["n"] == 1
    r = _get(gw, "/api/v1/resources")
    assert [c["id"] for c in r.json()["resources"]] == ["large", "local", "small"]
