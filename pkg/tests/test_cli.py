from __future__ import annotations

import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest
import requests

from flowforge.cli import main
from flowforge.provenance import MetricRecord, ProvenanceStore

from conftest import FIG3_DOC


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWFORGE_DATA_DIR", str(tmp_path))
    monkeypatch.setenv("FLOWFORGE_ACTOR", "tester")
    return tmp_path


@pytest.fixture
def fig3_file(env):
    path = env / "wf.json"
    path.write_text(json.dumps(FIG3_DOC))
    return str(path)


@pytest.fixture
def input_file(env):
    path = env / "input.ndjson"
    path.write_text('{"x": 1}\n')
    return str(path)


def test_validate_ok(fig3_file, capsys):
    assert main(["validate", fig3_file]) == 0
    assert capsys.readouterr().out.strip() == "ok"


def test_validate_cycle_lists_it(env, capsys):
    doc = {
        "id": "cyc", "version": 1,
        "steps": [
            {"id": "a", "kind": "builtin", "builtin_name": "identity"},
            {"id": "b", "kind": "builtin", "builtin_name": "identity"},
        ],
        "channels": [
            {"id": "c1", "producer": "a", "consumer": "b"},
            {"id": "c2", "producer": "b", "consumer": "a"},
        ],
    }
    path = env / "cyc.json"
    path.write_text(json.dumps(doc))
    assert main(["validate", str(path)]) == 1
    assert "cycle: a→b→a" in capsys.readouterr().out


def test_validate_missing_file_io_error(env):
    assert main(["validate", str(env / "nope.json")]) == 2


def test_validate_json_single_document(fig3_file, capsys):
    assert main(["validate", fig3_file, "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc == {"ok": True, "violations": []}


def test_run_local_exploratory(fig3_file, input_file, capsys):
    rc = main(["run", fig3_file, "--local", "--input", input_file])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Completed" in out


def test_run_local_json_output(fig3_file, input_file, capsys):
    rc = main(["run", fig3_file, "--local", "--input", input_file, "--json"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)  # exactly one JSON document
    assert doc["status"] == "Completed"
    assert doc["results_count"] == 1


def test_run_watch_renders_events(fig3_file, input_file, capsys):
    rc = main(["run", fig3_file, "--local", "--input", input_file, "--watch"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "RunStarted" in out and "RunCompleted" in out
    assert "TaskStateChanged" in out


def test_run_bad_workers_usage_error(fig3_file):
    assert main(["run", fig3_file, "--local", "--workers", "data-analysis=0"]) == 64
    assert main(["run", fig3_file, "--local", "--workers", "nonsense"]) == 64


def test_run_failed_workflow_exit_1(env, capsys):
    doc = {"id": "failing", "version": 1,
           "steps": [{"id": "s0", "kind": "builtin", "builtin_name": "fail",
                      "max_attempts": 1}],
           "channels": []}
    wf = env / "fail.json"
    wf.write_text(json.dumps(doc))
    inp = env / "in.ndjson"
    inp.write_text("{}\n")
    assert main(["run", str(wf), "--local", "--input", str(inp)]) == 1


def test_run_scaled_gated_exit_1(fig3_file, input_file, capsys):
    assert main(["ppods", "init", fig3_file]) == 0
    rc = main(["run", fig3_file, "--local", "--mode", "scaled", "--input", input_file])
    assert rc == 1
    err = capsys.readouterr().err
    assert "gate blocked" in err and "consensus" in err
    # --override-gate bypasses
    rc = main(["run", fig3_file, "--local", "--mode", "scaled", "--input", input_file,
               "--override-gate"])
    assert rc == 0


def _seed_constant_runtime(data_dir, step, rc_id, runtime, n=6):
    store = ProvenanceStore(root=data_dir)
    for i in range(n):
        mid = f"{rc_id}-m{i}"
        store.append_metric(MetricRecord(run_id=f"seed-{rc_id}", step_id=step, attempt=1,
                                         metric="input_bytes", value=float((i + 1) * 1e6),
                                         msg_id=mid, resource_class=rc_id))
        store.append_metric(MetricRecord(run_id=f"seed-{rc_id}", step_id=step, attempt=1,
                                         metric="runtime_s", value=float(runtime),
                                         msg_id=mid, resource_class=rc_id))
    store.close()


@pytest.fixture
def seeded_analytics(env):
    (env / "resources.json").write_text(json.dumps([
        {"id": "local", "cost_per_second": 0.0},
        {"id": "small", "cost_per_second": 0.10},
        {"id": "large", "cost_per_second": 0.50},
    ]))
    _seed_constant_runtime(env, "analysis", "small", 100.0)
    _seed_constant_runtime(env, "analysis", "large", 30.0)
    return env


def test_predict_no_data_exit_1(env, capsys):
    assert main(["predict", "ghost", "--class", "local", "--bytes", "100", "--local"]) == 1
    assert "NO_DATA" in capsys.readouterr().err


def test_recommend_two_class_output(seeded_analytics, capsys):
    rc = main(["recommend", "analysis", "--bytes", "1000000", "--deadline", "60",
               "--local"])
    assert rc == 0
    assert capsys.readouterr().out.strip() == "large 30.0s $15.00"


def test_recommend_json_schema(seeded_analytics, capsys):
    rc = main(["recommend", "analysis", "--bytes", "1000000", "--deadline", "60",
               "--local", "--json"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) == {"resource_class", "predicted_runtime_s", "predicted_cost",
                        "feasible", "alternatives"}
    assert doc["resource_class"] == "large" and doc["feasible"] is True


def test_advise_output(seeded_analytics, capsys):
    _seed_constant_runtime(seeded_analytics, "analysis", "local", 0.6)
    rc = main(["advise", "analysis", "--class", "local", "--pending", "1000",
               "--deadline", "120", "--local"])
    assert rc == 0
    assert capsys.readouterr().out.strip() == "7"


def test_metrics_command(seeded_analytics, capsys):
    rc = main(["metrics", "analysis", "--metric", "runtime_s", "--local", "--json"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["summary"]["n"] == 12


def test_ppods_full_cycle(env, fig3_file, capsys):
    fixture = env / "fixture.ndjson"
    fixture.write_text('{"x": 1}\n{"x": 2}\n')
    assert main(["ppods", "init", fig3_file]) == 0
    assert main(["ppods", "advance"]) == 0  # AGREE_METRICS
    assert main(["ppods", "target", "--id", "t-rt", "--step", "data-analysis",
                 "--metric", "runtime_s", "--comparator", "<=", "--threshold", "5"]) == 0
    assert main(["ppods", "testcase", "--id", "c-rt", "--step", "data-analysis",
                 "--fixture", str(fixture), "--targets", "t-rt"]) == 0
    assert main(["ppods", "advance"]) == 0  # DEVELOP
    assert main(["ppods", "gate"]) == 1     # missing result blocks
    out = capsys.readouterr().out
    assert "c-rt" in out
    assert main(["ppods", "test", "c-rt"]) == 0
    assert main(["ppods", "advance"]) == 0  # REPORT
    for member in ("m-data-eng", "m-data-sci", "m-comp-sci"):
        assert main(["ppods", "report", "--member", member, "--status", "success"]) == 0
    assert main(["ppods", "advance"]) == 0  # INTEGRATE
    assert main(["ppods", "advance", "--decision", "scale_ready"]) == 0
    assert main(["ppods", "gate"]) == 0
    # frozen ledger rejects further transitions
    assert main(["ppods", "advance"]) == 1
    assert "WRONG_PHASE" in capsys.readouterr().err


def test_ppods_advance_wrong_phase(env, fig3_file, capsys):
    assert main(["ppods", "init", fig3_file]) == 0
    assert main(["ppods", "advance"]) == 0
    assert main(["ppods", "advance"]) == 0  # DEVELOP
    assert main(["ppods", "advance"]) == 0  # REPORT
    assert main(["ppods", "advance"]) == 1  # missing reports
    assert "MISSING_REPORTS" in capsys.readouterr().err


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_health_and_shutdown(env):
    http_port, broker_port = _free_port(), _free_port()
    proc = subprocess.Popen(
        [sys.executable, "-m", "flowforge.cli", "serve",
         "--http", f"127.0.0.1:{http_port}", "--broker", f"127.0.0.1:{broker_port}"],
        env={**os.environ, "FLOWFORGE_DATA_DIR": str(env)},
        stderr=subprocess.PIPE, stdout=subprocess.PIPE)
    try:
        deadline = time.monotonic() + 15
        while time.monotonic() < deadline:
            try:
                r = requests.get(f"http://127.0.0.1:{http_port}/api/v1/runs", timeout=1)
                if r.status_code == 200:
                    break
            except requests.ConnectionError:
                time.sleep(0.1)
        else:
            pytest.fail("serve did not come up")
        assert r.json() == {"runs": []}
        proc.send_signal(signal.SIGINT)
        assert proc.wait(timeout=30) == 0
    finally:
        if proc.poll() is None:
            proc.kill()


def test_run_against_live_gateway(env, fig3_file, input_file, monkeypatch, capsys):
    http_port, broker_port = _free_port(), _free_port()
    proc = subprocess.Popen(
        [sys.executable, "-m", "flowforge.cli", "serve",
         "--http", f"127.0.0.1:{http_port}", "--broker", f"127.0.0.1:{broker_port}"],
        env={**os.environ, "FLOWFORGE_DATA_DIR": str(env / "server")},
        stderr=subprocess.PIPE, stdout=subprocess.PIPE)
    try:
        deadline = time.monotonic() + 15
        while time.monotonic() < deadline:
            try:
                if requests.get(f"http://127.0.0.1:{http_port}/api/v1/runs",
                                timeout=1).status_code == 200:
                    break
            except requests.ConnectionError:
                time.sleep(0.1)
        monkeypatch.setenv("FLOWFORGE_HTTP_ADDR", f"127.0.0.1:{http_port}")
        rc = main(["run", fig3_file, "--input", input_file, "--watch"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "RunStarted" in out and "RunCompleted" in out
        proc.send_signal(signal.SIGINT)
        assert proc.wait(timeout=30) == 0
    finally:
        if proc.poll() is None:
            proc.kill()


def test_serve_double_bind_fails(env):
    http_port, broker_port = _free_port(), _free_port()
    args = [sys.executable, "-m", "flowforge.cli", "serve",
            "--http", f"127.0.0.1:{http_port}", "--broker", f"127.0.0.1:{broker_port}"]
    first = subprocess.Popen(args, env={**os.environ, "FLOWFORGE_DATA_DIR": str(env)},
                             stderr=subprocess.PIPE, stdout=subprocess.PIPE)
    try:
        deadline = time.monotonic() + 15
        while time.monotonic() < deadline:
            try:
                requests.get(f"http://127.0.0.1:{http_port}/api/v1/runs", timeout=1)
                break
            except requests.ConnectionError:
                time.sleep(0.1)
        second = subprocess.run(
            args, env={**os.environ, "FLOWFORGE_DATA_DIR": str(env / "other")},
            capture_output=True, timeout=30)
        assert second.returncode == 1
        assert b"bind failed" in second.stderr
    finally:
        first.send_signal(signal.SIGINT)
        try:
            first.wait(timeout=15)
        except subprocess.TimeoutExpired:
            first.kill()
