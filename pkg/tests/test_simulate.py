from __future__ import annotations

import math
import random

import pytest

from flowforge.errors import SpecInvalid
from flowforge.model import ChannelSpec, StepSpec, WorkflowSpec
from flowforge.provenance import ProvenanceStore
from flowforge.resources import ResourceClass
from flowforge.simulate import simulate_cluster
from flowforge.tasks import TaskState

from conftest import linear_spec

SIM_RC = ResourceClass(id="sim", speed_factor=1.0)
FAST_RC = ResourceClass(id="fast", speed_factor=2.0)


def test_serial_makespan():
    spec = linear_spec(1, wf_id="sim1")
    res = simulate_cluster(spec, {"s0": 1}, {"s0": SIM_RC}, {"s0": 1.0}, n_messages=10)
    assert res.makespan_s == pytest.approx(10.0)
    assert len(res.task_runs) == 10


def test_five_workers_two_waves():
    spec = linear_spec(1, wf_id="sim2")
    res = simulate_cluster(spec, {"s0": 5}, {"s0": SIM_RC}, {"s0": 1.0}, n_messages=10)
    assert res.makespan_s == pytest.approx(2.0)
    ends = sorted(t.ended_at for t in res.task_runs)
    assert ends == [1000] * 5 + [2000] * 5  # two waves of five


def test_speed_factor_divides_service_time():
    spec = linear_spec(1, wf_id="sim3")
    res = simulate_cluster(spec, {"s0": 1}, {"s0": FAST_RC}, {"s0": 1.0}, n_messages=10)
    assert res.makespan_s == pytest.approx(5.0)


def test_per_item_service_list():
    spec = linear_spec(1, wf_id="sim4")
    res = simulate_cluster(spec, {"s0": 1}, {"s0": SIM_RC}, {"s0": [1.0, 2.0, 3.0]},
                           n_messages=3)
    assert res.makespan_s == pytest.approx(6.0)


def test_pipeline_flows_downstream():
    spec = linear_spec(2, wf_id="sim5")
    res = simulate_cluster(spec, {"s0": 1, "s1": 1}, {}, {"s0": 1.0, "s1": 1.0},
                           n_messages=3)
    # classic 2-stage pipeline: last item leaves stage 2 at 3 + 1
    assert res.makespan_s == pytest.approx(4.0)
    assert res.tasks_per_step == {"s0": 3, "s1": 3}


def test_diamond_fanout_counts():
    mk = lambda sid, ins, outs: StepSpec(id=sid, kind="builtin", builtin_name="identity",
                                         inputs=ins, outputs=outs)
    spec = WorkflowSpec(
        id="simdiamond", version=1,
        steps=(mk("a", (), ("ab", "ac")), mk("b", ("ab",), ("bd",)),
               mk("c", ("ac",), ("cd",)), mk("d", ("bd", "cd"), ())),
        channels=(ChannelSpec(id="ab", producer="a", consumer="b"),
                  ChannelSpec(id="ac", producer="a", consumer="c"),
                  ChannelSpec(id="bd", producer="b", consumer="d"),
                  ChannelSpec(id="cd", producer="c", consumer="d")))
    res = simulate_cluster(spec, {}, {}, {s.id: 0.5 for s in spec.steps}, n_messages=2)
    assert res.tasks_per_step == {"a": 2, "b": 2, "c": 2, "d": 4}


def test_rejects_nonpositive_service_times():
    spec = linear_spec(1, wf_id="simbad")
    with pytest.raises(SpecInvalid):
        simulate_cluster(spec, {}, {}, {"s0": 0.0}, n_messages=1)
    with pytest.raises(SpecInvalid):
        simulate_cluster(spec, {}, {}, {}, n_messages=1)


def test_all_tasks_succeed_with_synthetic_timestamps():
    spec = linear_spec(2, wf_id="simok")
    res = simulate_cluster(spec, {"s0": 2}, {}, {"s0": 0.25, "s1": 0.5}, n_messages=4)
    for t in res.task_runs:
        assert t.state == TaskState.SUCCEEDED
        assert t.ended_at >= t.started_at


def test_records_flagged_simulated():
    store = ProvenanceStore()
    spec = linear_spec(1, wf_id="simrec")
    simulate_cluster(spec, {}, {"s0": SIM_RC}, {"s0": 1.0}, n_messages=2,
                     store=store, run_id="sim-run")
    events = store.events("sim-run")
    assert all(e.body.get("simulated") for e in events)
    metrics = store.query_metrics(run_id="sim-run")
    assert len(metrics) == 2 and all(m.simulated for m in metrics)


def test_makespan_lower_bound_randomized():
    rng = random.Random(99)
    for _ in range(40):
        n_steps = rng.randint(1, 4)
        spec = linear_spec(n_steps, wf_id="simlb")
        n = rng.randint(1, 30)
        workers = {f"s{i}": rng.choice([1, 2, 4, 8]) for i in range(n_steps)}
        services = {f"s{i}": [rng.uniform(0.1, 2.0) for _ in range(n)]
                    for i in range(n_steps)}
        rc = {f"s{i}": rng.choice([SIM_RC, FAST_RC]) for i in range(n_steps)}
        res = simulate_cluster(spec, workers, rc, services, n_messages=n)
        for i in range(n_steps):
            sid = f"s{i}"
            min_service = min(services[sid]) / rc[sid].speed_factor
            bound = math.ceil(n / workers[sid]) * min_service
            assert res.makespan_s >= bound - 1e-9
