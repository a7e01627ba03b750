from __future__ import annotations

import json

import pytest

from flowforge.broker import Broker
from flowforge.executor import Engine
from flowforge.model import ChannelSpec, StepSpec, WorkflowSpec, parse_workflow
from flowforge.provenance import ProvenanceStore
from flowforge.resources import Catalog, ResourceClass

FIG3_DOC = {
    "id": "conceptual-pipeline",
    "version": 1,
    "params": {"resolution": 10},
    "default_resource_class": "local",
    "steps": [
        {"id": "data-acquisition", "owner": "m-data-eng", "kind": "builtin", "builtin_name": "identity"},
        {"id": "data-analysis", "owner": "m-data-sci", "kind": "builtin", "builtin_name": "identity"},
        {"id": "parameter-estimation", "owner": "m-data-sci", "kind": "builtin", "builtin_name": "identity"},
        {"id": "computational-model", "owner": "m-comp-sci", "kind": "builtin", "builtin_name": "identity"},
    ],
    "channels": [
        {"id": "acquired", "producer": "data-acquisition", "consumer": "data-analysis"},
        {"id": "analyzed", "producer": "data-analysis", "consumer": "parameter-estimation"},
        {"id": "estimated", "producer": "parameter-estimation", "consumer": "computational-model"},
    ],
}


def fig3_text() -> str:
    return json.dumps(FIG3_DOC, indent=2)


def fig3_spec() -> WorkflowSpec:
    return parse_workflow(fig3_text())


def builtin_step(sid: str, name: str = "identity", owner: str = "", **kw) -> StepSpec:
    return StepSpec(id=sid, kind="builtin", builtin_name=name, owner=owner, **kw)


def linear_spec(n_steps: int, builtin: str = "identity", wf_id: str = "line",
                capacity: int = 1024, max_attempts: int = 3) -> WorkflowSpec:
    """s0 -> s1 -> ... -> s{n-1} chained by channels c1..c{n-1}."""
    steps = []
    channels = []
    for i in range(n_steps):
        inputs = (f"c{i}",) if i > 0 else ()
        outputs = (f"c{i+1}",) if i < n_steps - 1 else ()
        steps.append(StepSpec(id=f"s{i}", kind="builtin", builtin_name=builtin,
                              inputs=inputs, outputs=outputs, max_attempts=max_attempts))
        if i < n_steps - 1:
            channels.append(ChannelSpec(id=f"c{i+1}", producer=f"s{i}", consumer=f"s{i+1}",
                                        capacity=capacity))
    return WorkflowSpec(id=wf_id, version=1, steps=tuple(steps), channels=tuple(channels))


TWO_CLASS_CATALOG = Catalog([
    ResourceClass(id="local", cores=1, mem_gb=4.0, cost_per_second=0.0),
    ResourceClass(id="small", cores=2, mem_gb=8.0, cost_per_second=0.10),
    ResourceClass(id="large", cores=16, mem_gb=64.0, cost_per_second=0.50, speed_factor=4.0),
])


@pytest.fixture
def broker() -> Broker:
    b = Broker(log_dir=None)
    yield b
    b.close()


@pytest.fixture
def store() -> ProvenanceStore:
    return ProvenanceStore(root=None)


@pytest.fixture
def engine(broker, store) -> Engine:
    eng = Engine(broker, store, catalog=TWO_CLASS_CATALOG, record_trail=False)
    yield eng
    eng.shutdown(timeout_s=5)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" in nodeid and "::" in nodeid:
                lines.append((nodeid.split("::")[-1], label))
    if lines:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for name, label in sorted(lines):
            terminalreporter.write_line(f"  [{label}] {name}")
