"""Wires broker, store, engine, analytics, and the PPoDS ledger together."""

from __future__ import annotations

import json
from pathlib import Path

from . import config
from .broker import Broker
from .errors import UnknownRun
from .executor import Engine
from .model import WorkflowSpec, parse_workflow, serialize_workflow
from .ppods import PpodsService
from .provenance import ProvenanceStore
from .resources import Catalog
from .smartflows import SmartFlows


class FlowforgeApp:
    """One deployable unit: everything `flowforge serve` runs, and the same
    composition the CLI embeds with ``--local``."""

    def __init__(self, data_dir: str | Path | None = None, *,
                 catalog: Catalog | None = None, fsync: str = "interval:100",
                 record_trail: bool = True, broker_addr: str = "",
                 fault_policy: str = "warn", actors: dict[str, str] | None = None,
                 engine_kwargs: dict | None = None):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
        self.actors = dict(actors or {})

        if catalog is not None:
            self.catalog = catalog
        elif self.data_dir is not None and (self.data_dir / "resources.json").exists():
            self.catalog = Catalog.load(self.data_dir / "resources.json")
        else:
            self.catalog = Catalog()

        broker_dir = self.data_dir / "broker" if self.data_dir is not None else None
        self.broker = Broker(log_dir=broker_dir, fsync=fsync)
        self.store = ProvenanceStore(root=self.data_dir, fsync=fsync)
        self.ppods = PpodsService(self.data_dir or ".", store=self.store)
        self.engine = Engine(self.broker, self.store, catalog=self.catalog,
                             broker_addr=broker_addr, record_trail=record_trail,
                             gate_checker=self.ppods.gate_checker,
                             **(engine_kwargs or {}))
        self.ppods.engine = self.engine
        models_dir = self.data_dir / "models" if self.data_dir is not None else None
        self.smartflows = SmartFlows(self.store, self.catalog, engine=self.engine,
                                     broker=self.broker, fault_policy=fault_policy,
                                     models_dir=models_dir)
        self._workflows: dict[str, WorkflowSpec] = {}
        self._load_workflows()

    # -- workflow registry ---------------------------------------------------------

    def _workflow_dir(self) -> Path | None:
        return self.data_dir / "workflows" if self.data_dir is not None else None

    def _load_workflows(self):
        wdir = self._workflow_dir()
        if wdir is None or not wdir.is_dir():
            return
        for path in sorted(wdir.glob("*.json")):
            spec = parse_workflow(path.read_text(encoding="utf-8"))
            self._workflows[spec.id] = spec

    def register_workflow(self, spec: WorkflowSpec) -> WorkflowSpec:
        self._workflows[spec.id] = spec
        wdir = self._workflow_dir()
        if wdir is not None:
            wdir.mkdir(parents=True, exist_ok=True)
            (wdir / f"{spec.id}.json").write_text(serialize_workflow(spec), encoding="utf-8")
        return spec

    def get_workflow(self, workflow_id: str) -> WorkflowSpec | None:
        return self._workflows.get(workflow_id)

    def workflows(self) -> list[WorkflowSpec]:
        return [self._workflows[k] for k in sorted(self._workflows)]

    # -- run views -------------------------------------------------------------------

    def run_view(self, run_id: str) -> dict:
        """RunHandle plus live queue depths and task-state counts."""
        handle = self.engine.run_handle(run_id)
        tasks = self.engine.task_runs(run_id)
        counts: dict[str, dict[str, int]] = {}
        for t in tasks:
            per = counts.setdefault(t.step_id, {})
            per[t.state.value] = per.get(t.state.value, 0) + 1
        return {
            **handle.to_dict(),
            "queue_depths": {q: {"ready": r, "in_flight": f}
                             for q, (r, f) in self.engine.queue_depths_for(run_id).items()},
            "task_counts": counts,
            "results_count": len(self.engine.results(run_id)),
        }

    def permission_for(self, actor: str) -> str:
        """Configured permission; an empty actor map runs in open mode."""
        if not self.actors:
            return "steer"
        return self.actors.get(actor, "read")

    def shutdown(self, timeout_s: float = 30.0):
        self.engine.shutdown(timeout_s)
        self.broker.close()
        self.store.close()
