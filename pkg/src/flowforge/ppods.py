"""Test-driven iteration ledger: metric targets, test cases, phase cycle, gate.

The cycle is a five-phase state machine: Decompose(1) and AgreeMetrics(2)
run once, then Develop(3) -> Report(4) -> Integrate(5) repeats until the
team records a ``scale_ready`` consensus, at which point the ledger freezes
and the scale-readiness gate can open. Targets and test cases may only be
(re)defined while agreeing metrics or integrating; earlier versions stay
queryable.

Persisted as ``ppods/ledger.json`` under the data dir, rewritten whole with
an atomic rename per mutation and guarded by a file lock so CLI and gateway
can share it.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

from filelock import FileLock

from .errors import (DuplicateId, ExecutionFailed, GateBlocked, InvalidTarget,
                     MissingConsensus, MissingReports, NoData, SchemaError, UnknownStep,
                     WrongPhase)
from .model import StepSpec, WorkflowSpec, parse_workflow, serialize_workflow, workflow_to_doc
from .provenance import REGISTERED_METRICS

_CUSTOM_RE = re.compile(r"^custom\.[A-Za-z0-9_.:-]+$")

COMPARATORS = ("<=", ">=", "within_pct")


class Phase(IntEnum):
    DECOMPOSE = 1
    AGREE_METRICS = 2
    DEVELOP = 3
    REPORT = 4
    INTEGRATE = 5


_DEFINE_PHASES = (Phase.AGREE_METRICS, Phase.INTEGRATE)


@dataclass
class MetricTarget:
    id: str
    step_id: str
    metric: str
    comparator: str
    threshold: float
    epsilon_pct: float = 0.0  # within_pct only
    unit: str = ""
    rationale: str = ""
    iteration: int = 1

    def check(self, measured: float) -> bool:
        if self.comparator == "<=":
            return measured <= self.threshold
        if self.comparator == ">=":
            return measured >= self.threshold
        return abs(measured - self.threshold) <= self.epsilon_pct / 100.0 * abs(self.threshold)


@dataclass
class TestCase:
    __test__ = False  # domain type, not a pytest class

    id: str
    step_id: str
    fixture_payloads: list = field(default_factory=list)
    target_ids: list[str] = field(default_factory=list)
    iteration: int = 1


@dataclass
class TestResult:
    __test__ = False
    case_id: str
    iteration: int
    passed: bool
    task_outcome: str  # Completed | Failed | error text
    per_target: dict[str, dict] = field(default_factory=dict)  # tid -> {passed, measured}
    run_id: str = ""   # provenance linkage so the gate can be re-verified
    reason: str = ""
    at: int = 0


class PpodsLedger:
    def __init__(self, spec: WorkflowSpec):
        self.workflow_doc = workflow_to_doc(spec)
        self.workflow_id = spec.id
        self.owners = {s.id: s.owner for s in spec.steps if s.owner}
        self.step_ids = [s.id for s in spec.steps]
        self.iteration = 1
        self.phase = Phase.DECOMPOSE
        self.phase_history: list[int] = [1]
        self.targets: dict[str, list[MetricTarget]] = {}
        self.cases: dict[str, list[TestCase]] = {}
        self.results: list[TestResult] = []
        self.reports: dict[int, dict[str, dict]] = {}
        self.consensus: dict[int, dict] = {}
        self.frozen = False

    # -- accessors ---------------------------------------------------------------

    def spec(self) -> WorkflowSpec:
        return parse_workflow(json.dumps(self.workflow_doc))

    def current_target(self, tid: str) -> MetricTarget | None:
        versions = self.targets.get(tid)
        return versions[-1] if versions else None

    def current_case(self, cid: str) -> TestCase | None:
        versions = self.cases.get(cid)
        return versions[-1] if versions else None

    def latest_result(self, cid: str, iteration: int | None = None) -> TestResult | None:
        it = self.iteration if iteration is None else iteration
        for r in reversed(self.results):
            if r.case_id == cid and r.iteration == it:
                return r
        return None

    def members(self) -> list[str]:
        return sorted(set(self.owners.values()))

    # -- mutations ---------------------------------------------------------------

    def _check_not_frozen(self):
        if self.frozen:
            raise WrongPhase("ledger is frozen after scale_ready")

    def define_target(self, t: MetricTarget):
        self._check_not_frozen()
        if self.phase not in _DEFINE_PHASES:
            raise WrongPhase(f"cannot define targets during {self.phase.name}")
        if t.step_id not in self.step_ids:
            raise UnknownStep(t.step_id)
        if t.comparator not in COMPARATORS:
            raise InvalidTarget(f"unknown comparator: {t.comparator}")
        if t.comparator == "within_pct" and not t.epsilon_pct > 0:
            raise InvalidTarget("within_pct requires epsilon > 0")
        if not (t.metric in REGISTERED_METRICS or _CUSTOM_RE.match(t.metric)):
            raise InvalidTarget(f"malformed metric key: {t.metric}")
        if not math.isfinite(t.threshold):
            raise InvalidTarget("threshold must be finite")
        existing = self.current_target(t.id)
        # Integrate-phase redefinition is a revision; a second definition while
        # still agreeing metrics is a mistake.
        if (existing is not None and self.phase == Phase.AGREE_METRICS
                and existing.iteration == self.iteration):
            raise DuplicateId(f"target {t.id} already defined in iteration {self.iteration}")
        t.iteration = self.iteration
        self.targets.setdefault(t.id, []).append(t)

    def define_testcase(self, c: TestCase):
        self._check_not_frozen()
        if self.phase not in _DEFINE_PHASES:
            raise WrongPhase(f"cannot define test cases during {self.phase.name}")
        if c.step_id not in self.step_ids:
            raise UnknownStep(c.step_id)
        if not c.target_ids:
            raise InvalidTarget("test case needs at least one target")
        for tid in c.target_ids:
            t = self.current_target(tid)
            if t is None:
                raise InvalidTarget(f"unknown target: {tid}")
            if t.step_id != c.step_id:
                raise InvalidTarget(f"target {tid} is for step {t.step_id}, case is for {c.step_id}")
        existing = self.current_case(c.id)
        if (existing is not None and self.phase == Phase.AGREE_METRICS
                and existing.iteration == self.iteration):
            raise DuplicateId(f"case {c.id} already defined in iteration {self.iteration}")
        c.iteration = self.iteration
        self.cases.setdefault(c.id, []).append(c)

    def record_result(self, result: TestResult):
        self._check_not_frozen()
        if self.phase != Phase.DEVELOP:
            raise WrongPhase(f"test cases run during DEVELOP, not {self.phase.name}")
        if self.current_case(result.case_id) is None:
            raise InvalidTarget(f"unknown case: {result.case_id}")
        result.iteration = self.iteration
        self.results.append(result)

    def submit_report(self, member: str, status: str, text: str = ""):
        self._check_not_frozen()
        if self.phase != Phase.REPORT:
            raise WrongPhase(f"reports are submitted during REPORT, not {self.phase.name}")
        if status not in ("success", "concern"):
            raise SchemaError(f"report status must be success|concern, got {status}")
        if member not in self.owners.values():
            raise SchemaError(f"{member} owns no step in {self.workflow_id}")
        self.reports.setdefault(self.iteration, {})[member] = {"status": status, "text": text}

    def advance_phase(self, decision: str | None = None, text: str = "") -> Phase:
        self._check_not_frozen()
        if self.phase == Phase.DECOMPOSE:
            self.phase = Phase.AGREE_METRICS
        elif self.phase == Phase.AGREE_METRICS:
            self.phase = Phase.DEVELOP
        elif self.phase == Phase.DEVELOP:
            self.phase = Phase.REPORT
        elif self.phase == Phase.REPORT:
            missing = sorted(set(self.members()) - set(self.reports.get(self.iteration, {})))
            if missing:
                raise MissingReports(f"missing reports from: {', '.join(missing)}")
            self.phase = Phase.INTEGRATE
        elif self.phase == Phase.INTEGRATE:
            if decision is None:
                raise MissingConsensus("leaving INTEGRATE requires a consensus decision")
            if decision not in ("iterate", "scale_ready"):
                raise SchemaError(f"decision must be iterate|scale_ready, got {decision}")
            if decision == "scale_ready":
                blocking = self._blocking_cases()
                if blocking:
                    raise GateBlocked("test cases block scale_ready",
                                      report={"ready": False, "blocking": blocking})
                self.consensus[self.iteration] = {"decision": decision, "text": text}
                self.frozen = True
                return self.phase
            self.consensus[self.iteration] = {"decision": decision, "text": text}
            self.iteration += 1
            self.phase = Phase.DEVELOP
        self.phase_history.append(int(self.phase))
        return self.phase

    # -- gate ---------------------------------------------------------------------

    def _blocking_cases(self) -> list[str]:
        blocking = []
        for cid in sorted(self.cases):
            result = self.latest_result(cid)
            if result is None:
                blocking.append(f"case {cid}: no result in iteration {self.iteration}")
            elif not result.passed:
                failing = sorted(tid for tid, r in result.per_target.items() if not r["passed"])
                detail = ", ".join(failing) if failing else (result.reason or "failed")
                blocking.append(f"case {cid}: failing ({detail})")
        return blocking

    def check_gate(self) -> dict:
        blocking = self._blocking_cases()
        cons = self.consensus.get(self.iteration)
        if cons is None or cons.get("decision") != "scale_ready":
            blocking.append("no scale_ready consensus")
        return {"ready": not blocking, "blocking": blocking,
                "iteration": self.iteration, "workflow_id": self.workflow_id}

    # -- serialization --------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "workflow": self.workflow_doc,
            "iteration": self.iteration,
            "phase": int(self.phase),
            "phase_history": list(self.phase_history),
            "frozen": self.frozen,
            "targets": {tid: [asdict(t) for t in vs] for tid, vs in self.targets.items()},
            "cases": {cid: [asdict(c) for c in vs] for cid, vs in self.cases.items()},
            "results": [asdict(r) for r in self.results],
            "reports": {str(k): v for k, v in self.reports.items()},
            "consensus": {str(k): v for k, v in self.consensus.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PpodsLedger":
        spec = parse_workflow(json.dumps(d["workflow"]))
        ledger = cls(spec)
        ledger.iteration = d["iteration"]
        ledger.phase = Phase(d["phase"])
        ledger.phase_history = list(d["phase_history"])
        ledger.frozen = d["frozen"]
        ledger.targets = {tid: [MetricTarget(**t) for t in vs] for tid, vs in d["targets"].items()}
        ledger.cases = {cid: [TestCase(**c) for c in vs] for cid, vs in d["cases"].items()}
        ledger.results = [TestResult(**r) for r in d["results"]]
        ledger.reports = {int(k): v for k, v in d["reports"].items()}
        ledger.consensus = {int(k): v for k, v in d["consensus"].items()}
        return ledger


class PpodsService:
    """File-backed ledger operations shared by CLI and gateway."""

    def __init__(self, data_dir: str | Path, engine=None, store=None):
        self.dir = Path(data_dir) / "ppods"
        self.path = self.dir / "ledger.json"
        self._lock = FileLock(str(self.path) + ".lock")
        self.engine = engine
        self.store = store

    def exists(self) -> bool:
        return self.path.exists()

    def _load(self) -> PpodsLedger:
        if not self.path.exists():
            raise NoData("no ppods ledger; run `flowforge ppods init` first")
        with open(self.path, encoding="utf-8") as fh:
            return PpodsLedger.from_dict(json.load(fh))

    def _save(self, ledger: PpodsLedger):
        self.dir.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(ledger.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def init(self, spec: WorkflowSpec) -> dict:
        with self._lock:
            ledger = PpodsLedger(spec)
            self._save(ledger)
            return self.state()

    def state(self) -> dict:
        with self._lock:
            ledger = self._load()
        d = ledger.to_dict()
        d["phase_name"] = Phase(d["phase"]).name
        d["members"] = ledger.members()
        d["gate"] = ledger.check_gate()
        return d

    def define_target(self, **kw) -> dict:
        with self._lock:
            ledger = self._load()
            ledger.define_target(MetricTarget(**kw))
            self._save(ledger)
        return self.state()

    def define_testcase(self, **kw) -> dict:
        with self._lock:
            ledger = self._load()
            ledger.define_testcase(TestCase(**kw))
            self._save(ledger)
        return self.state()

    def submit_report(self, member: str, status: str, text: str = "") -> dict:
        with self._lock:
            ledger = self._load()
            ledger.submit_report(member, status, text)
            self._save(ledger)
        return self.state()

    def advance_phase(self, decision: str | None = None, text: str = "") -> dict:
        with self._lock:
            ledger = self._load()
            ledger.advance_phase(decision, text)
            self._save(ledger)
        return self.state()

    def check_gate(self) -> dict:
        with self._lock:
            return self._load().check_gate()

    def gate_checker(self, workflow_id: str) -> dict | None:
        """Engine hook: a gate report for ledgered workflows, None otherwise."""
        try:
            with self._lock:
                ledger = self._load()
        except NoData:
            return None
        if ledger.workflow_id != workflow_id:
            return None
        return ledger.check_gate()

    def run_testcase(self, case_id: str, timeout_s: float = 120.0) -> TestResult:
        """Run a case's step in exploratory mode and judge its targets.

        Execution failure does not raise but yields a fail-all result with
        the failure reason; the measurements land in the provenance store as
        ordinary exploratory data either way.
        """
        if self.engine is None or self.store is None:
            raise ExecutionFailed("ppods service has no engine attached")
        with self._lock:
            ledger = self._load()
            if ledger.frozen:
                raise WrongPhase("ledger is frozen after scale_ready")
            if ledger.phase != Phase.DEVELOP:
                raise WrongPhase(f"test cases run during DEVELOP, not {ledger.phase.name}")
            case = ledger.current_case(case_id)
            if case is None:
                raise InvalidTarget(f"unknown case: {case_id}")
            spec = ledger.spec()
            targets = [ledger.current_target(tid) for tid in case.target_ids]

        step = spec.step(case.step_id)
        solo = StepSpec(id=step.id, kind=step.kind, owner=step.owner, command=step.command,
                        builtin_name=step.builtin_name, inputs=(), outputs=(),
                        resource_request=step.resource_request,
                        max_attempts=step.max_attempts, timeout_s=step.timeout_s)
        test_spec = WorkflowSpec(id=spec.id, version=spec.version, steps=(solo,),
                                 params=spec.params,
                                 default_resource_class=spec.default_resource_class)
        payloads = [json.dumps(p).encode() if not isinstance(p, (bytes, str)) else
                    (p.encode() if isinstance(p, str) else p)
                    for p in case.fixture_payloads]
        handle = self.engine.start_run(test_spec, mode="exploratory", source_messages=payloads)
        final = self.engine.wait(handle.run_id, timeout=timeout_s)

        from .provenance import now_ms
        if final.status.value != "Completed":
            result = TestResult(
                case_id=case_id, iteration=0, passed=False, task_outcome=final.status.value,
                per_target={t.id: {"passed": False, "measured": None} for t in targets},
                run_id=handle.run_id, reason=f"execution {final.status.value}", at=now_ms())
        else:
            per_target = {}
            all_pass = True
            for t in targets:
                recs = self.store.query_metrics(run_id=handle.run_id, step_id=case.step_id,
                                                metric=t.metric)
                if not recs:
                    per_target[t.id] = {"passed": False, "measured": None}
                    all_pass = False
                    continue
                measured = sum(r.value for r in recs) / len(recs)  # mean over fixture items
                ok = t.check(measured)
                per_target[t.id] = {"passed": ok, "measured": measured}
                all_pass = all_pass and ok
            result = TestResult(case_id=case_id, iteration=0, passed=all_pass,
                                task_outcome="Completed", per_target=per_target,
                                run_id=handle.run_id, at=now_ms())

        with self._lock:
            ledger = self._load()
            ledger.record_result(result)
            self._save(ledger)
        return result
