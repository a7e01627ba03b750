"""Workflow specifications: DAGs of queue-connected composable steps.

A workflow document is a JSON object with top-level keys ``id, version,
params, steps, channels, default_resource_class``. Channels carry the
producer/consumer wiring; step ``inputs``/``outputs`` may be omitted in the
document and are derived from the channels. Canonical serialization sorts
keys lexicographically, indents with 2 spaces, and ends lines with LF.

Everything here is a pure function over immutable values.
"""

from __future__ import annotations

import heapq
import json
import re
from dataclasses import dataclass, replace

from .errors import CycleError, SchemaError, UnknownParamError, WorkflowSyntaxError

ParamValue = str | int | float | bool

_SLUG_RE = re.compile(r"^[a-z0-9-]{1,64}$")
_PLACEHOLDER_RE = re.compile(r"\$\{([A-Za-z0-9_.-]+)\}")

STEP_KINDS = ("subprocess", "builtin")

DEFAULT_CAPACITY = 1024
DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_TIMEOUT_S = 3600.0
DEFAULT_RESOURCE_CLASS = "local"


@dataclass(frozen=True)
class ChannelSpec:
    id: str
    producer: str
    consumer: str
    capacity: int = DEFAULT_CAPACITY


@dataclass(frozen=True)
class StepSpec:
    id: str
    kind: str
    owner: str = ""
    command: tuple[str, ...] = ()
    builtin_name: str | None = None
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    resource_request: str | None = None
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    timeout_s: float = DEFAULT_TIMEOUT_S


@dataclass(frozen=True)
class WorkflowSpec:
    id: str
    version: int
    steps: tuple[StepSpec, ...] = ()
    channels: tuple[ChannelSpec, ...] = ()
    params: tuple[tuple[str, object], ...] = ()
    default_resource_class: str = DEFAULT_RESOURCE_CLASS

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(sorted(self.steps, key=lambda s: s.id)))
        object.__setattr__(self, "channels", tuple(sorted(self.channels, key=lambda c: c.id)))
        object.__setattr__(self, "params", tuple(sorted(self.params, key=lambda kv: kv[0])))

    @property
    def param_map(self) -> dict[str, object]:
        return dict(self.params)

    def step(self, step_id: str) -> StepSpec:
        for s in self.steps:
            if s.id == step_id:
                return s
        raise KeyError(step_id)

    def channel(self, channel_id: str) -> ChannelSpec:
        for c in self.channels:
            if c.id == channel_id:
                return c
        raise KeyError(channel_id)

    def source_steps(self) -> tuple[str, ...]:
        """Steps with no input channels; they receive seeded source messages."""
        return tuple(s.id for s in self.steps if not s.inputs)

    def sink_steps(self) -> tuple[str, ...]:
        """Steps with no output channels; their outputs form the run result."""
        return tuple(s.id for s in self.steps if not s.outputs)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...] = ()


def _require(cond: bool, msg: str):
    if not cond:
        raise SchemaError(msg)


def _check_fields(obj: dict, where: str, required: set[str], optional: set[str]):
    unknown = set(obj) - required - optional
    if unknown:
        raise SchemaError(f"{where}: unknown field: {sorted(unknown)[0]}")
    missing = required - set(obj)
    if missing:
        raise SchemaError(f"{where}: missing field: {sorted(missing)[0]}")


def _parse_step(obj: dict) -> StepSpec:
    _require(isinstance(obj, dict), "step: expected object")
    _check_fields(
        obj,
        f"step {obj.get('id', '?')}",
        required={"id", "kind"},
        optional={"owner", "command", "builtin_name", "inputs", "outputs",
                  "resource_request", "max_attempts", "timeout_s"},
    )
    sid = obj["id"]
    _require(isinstance(sid, str) and sid, "step: id must be a non-empty string")
    kind = obj["kind"]
    _require(kind in STEP_KINDS, f"step {sid}: kind must be one of {list(STEP_KINDS)}")
    command = obj.get("command", [])
    _require(isinstance(command, list) and all(isinstance(t, str) for t in command),
             f"step {sid}: command must be a list of strings")
    if kind == "subprocess":
        _require(len(command) > 0, f"step {sid}: subprocess command must be non-empty")
    builtin_name = obj.get("builtin_name")
    _require(builtin_name is None or (isinstance(builtin_name, str) and builtin_name),
             f"step {sid}: builtin_name must be a non-empty string")
    if kind == "builtin":
        _require(builtin_name is not None, f"step {sid}: builtin_name required for builtin steps")
    for key in ("inputs", "outputs"):
        vals = obj.get(key, [])
        _require(isinstance(vals, list) and all(isinstance(v, str) for v in vals),
                 f"step {sid}: {key} must be a list of channel ids")
    max_attempts = obj.get("max_attempts", DEFAULT_MAX_ATTEMPTS)
    _require(isinstance(max_attempts, int) and not isinstance(max_attempts, bool) and max_attempts >= 1,
             f"step {sid}: max_attempts must be a positive integer")
    timeout_s = obj.get("timeout_s", DEFAULT_TIMEOUT_S)
    _require(isinstance(timeout_s, (int, float)) and not isinstance(timeout_s, bool) and timeout_s > 0,
             f"step {sid}: timeout_s must be a positive number")
    owner = obj.get("owner", "")
    _require(isinstance(owner, str), f"step {sid}: owner must be a string")
    rc = obj.get("resource_request")
    _require(rc is None or (isinstance(rc, str) and rc),
             f"step {sid}: resource_request must be a non-empty string")
    return StepSpec(
        id=sid, kind=kind, owner=owner, command=tuple(command),
        builtin_name=builtin_name, inputs=tuple(obj.get("inputs", [])),
        outputs=tuple(obj.get("outputs", [])), resource_request=rc,
        max_attempts=max_attempts, timeout_s=float(timeout_s),
    )


def _parse_channel(obj: dict) -> ChannelSpec:
    _require(isinstance(obj, dict), "channel: expected object")
    _check_fields(obj, f"channel {obj.get('id', '?')}",
                  required={"id", "producer", "consumer"}, optional={"capacity"})
    cid = obj["id"]
    _require(isinstance(cid, str) and cid, "channel: id must be a non-empty string")
    for key in ("producer", "consumer"):
        _require(isinstance(obj[key], str) and obj[key],
                 f"channel {cid}: {key} must be a non-empty string")
    capacity = obj.get("capacity", DEFAULT_CAPACITY)
    _require(isinstance(capacity, int) and not isinstance(capacity, bool) and capacity >= 1,
             f"channel {cid}: capacity must be a positive integer")
    return ChannelSpec(id=cid, producer=obj["producer"], consumer=obj["consumer"], capacity=capacity)


def parse_workflow(text: str) -> WorkflowSpec:
    """Parse a workflow document, applying defaults and deriving step wiring."""
    if not text.strip():
        raise WorkflowSyntaxError("empty document", line=1)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise WorkflowSyntaxError(f"line {e.lineno}: {e.msg}", line=e.lineno) from e
    _require(isinstance(doc, dict), "top level must be an object")
    _check_fields(doc, "workflow", required={"id", "version", "steps", "channels"},
                  optional={"params", "default_resource_class"})
    wid = doc["id"]
    _require(isinstance(wid, str) and _SLUG_RE.match(wid) is not None,
             "workflow id must match [a-z0-9-]{1,64}")
    version = doc["version"]
    _require(isinstance(version, int) and not isinstance(version, bool) and version >= 1,
             "version must be a positive integer")
    _require(isinstance(doc["steps"], list), "steps must be a list")
    _require(isinstance(doc["channels"], list), "channels must be a list")
    steps = [_parse_step(s) for s in doc["steps"]]
    channels = [_parse_channel(c) for c in doc["channels"]]

    params = doc.get("params", {})
    _require(isinstance(params, dict), "params must be an object")
    for k, v in params.items():
        _require(isinstance(v, (str, int, float, bool)),
                 f"param {k}: value must be string, number or boolean")

    drc = doc.get("default_resource_class", DEFAULT_RESOURCE_CLASS)
    _require(isinstance(drc, str) and drc, "default_resource_class must be a non-empty string")

    # Derive inputs/outputs from channels when omitted; reject references to
    # channels that do not exist in the document.
    by_consumer: dict[str, list[str]] = {}
    by_producer: dict[str, list[str]] = {}
    channel_ids = {c.id for c in channels}
    for c in channels:
        by_producer.setdefault(c.producer, []).append(c.id)
        by_consumer.setdefault(c.consumer, []).append(c.id)
    resolved = []
    for s in steps:
        for cid in (*s.inputs, *s.outputs):
            if cid not in channel_ids:
                raise SchemaError(f"step {s.id}: unknown channel: {cid}")
        inputs = s.inputs or tuple(sorted(by_consumer.get(s.id, [])))
        outputs = s.outputs or tuple(sorted(by_producer.get(s.id, [])))
        resolved.append(replace(s, inputs=inputs, outputs=outputs))

    return WorkflowSpec(
        id=wid, version=version, steps=tuple(resolved), channels=tuple(channels),
        params=tuple(params.items()), default_resource_class=drc,
    )


def workflow_to_doc(spec: WorkflowSpec) -> dict:
    return {
        "id": spec.id,
        "version": spec.version,
        "params": {k: v for k, v in spec.params},
        "default_resource_class": spec.default_resource_class,
        "steps": [
            {
                "id": s.id,
                "owner": s.owner,
                "kind": s.kind,
                "command": list(s.command),
                "builtin_name": s.builtin_name,
                "inputs": list(s.inputs),
                "outputs": list(s.outputs),
                "resource_request": s.resource_request,
                "max_attempts": s.max_attempts,
                "timeout_s": s.timeout_s,
            }
            for s in spec.steps
        ],
        "channels": [
            {"id": c.id, "producer": c.producer, "consumer": c.consumer, "capacity": c.capacity}
            for c in spec.channels
        ],
    }


def serialize_workflow(spec: WorkflowSpec) -> str:
    return json.dumps(workflow_to_doc(spec), sort_keys=True, indent=2) + "\n"


def _adjacency(spec: WorkflowSpec) -> dict[str, set[str]]:
    adj: dict[str, set[str]] = {s.id: set() for s in spec.steps}
    for c in spec.channels:
        if c.producer in adj and c.consumer in adj:
            adj[c.producer].add(c.consumer)
    return adj


def _find_cycle(adj: dict[str, set[str]]) -> list[str] | None:
    """First cycle by DFS over lexicographically sorted nodes and edges."""
    color: dict[str, int] = {}  # 0 absent, 1 on stack, 2 done
    parent: dict[str, str] = {}
    for root in sorted(adj):
        if color.get(root):
            continue
        stack = [(root, iter(sorted(adj[root])))]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color.get(nxt) == 1:
                    cycle = [nxt]
                    cur = node
                    while cur != nxt:
                        cycle.append(cur)
                        cur = parent[cur]
                    cycle.reverse()
                    start = cycle.index(min(cycle))
                    return cycle[start:] + cycle[:start]
                if not color.get(nxt):
                    color[nxt] = 1
                    parent[nxt] = node
                    stack.append((nxt, iter(sorted(adj[nxt]))))
                    advanced = True
                    break
            if not advanced:
                color[node] = 2
                stack.pop()
    return None


def validate_dag(spec: WorkflowSpec, builtins: set[str] | None = None) -> ValidationReport:
    """Check all WorkflowSpec invariants, returning violations as data.

    Violations are ordered lexicographically by the id they concern. When
    ``builtins`` is given, builtin step names are checked against it.
    """
    keyed: list[tuple[str, str]] = []

    seen_steps: set[str] = set()
    for s in spec.steps:
        if s.id in seen_steps:
            keyed.append((s.id, f"duplicate step id: {s.id}"))
        seen_steps.add(s.id)
    seen_channels: set[str] = set()
    for c in spec.channels:
        if c.id in seen_channels:
            keyed.append((c.id, f"duplicate channel id: {c.id}"))
        seen_channels.add(c.id)

    step_ids = {s.id for s in spec.steps}
    for c in spec.channels:
        if c.producer not in step_ids:
            keyed.append((c.id, f"channel {c.id}: unknown producer: {c.producer}"))
        if c.consumer not in step_ids:
            keyed.append((c.id, f"channel {c.id}: unknown consumer: {c.consumer}"))
        if c.producer == c.consumer:
            keyed.append((c.id, f"channel {c.id}: producer equals consumer"))

    channel_by_id = {c.id: c for c in spec.channels}
    for s in spec.steps:
        overlap = set(s.inputs) & set(s.outputs)
        for cid in sorted(overlap):
            keyed.append((s.id, f"step {s.id}: channel {cid} in both inputs and outputs"))
        for cid in s.inputs:
            c = channel_by_id.get(cid)
            if c is None:
                keyed.append((s.id, f"step {s.id}: unknown input channel: {cid}"))
            elif c.consumer != s.id:
                keyed.append((s.id, f"step {s.id}: input channel {cid} is consumed by {c.consumer}"))
        for cid in s.outputs:
            c = channel_by_id.get(cid)
            if c is None:
                keyed.append((s.id, f"step {s.id}: unknown output channel: {cid}"))
            elif c.producer != s.id:
                keyed.append((s.id, f"step {s.id}: output channel {cid} is produced by {c.producer}"))
        if s.kind == "subprocess" and not s.command:
            keyed.append((s.id, f"step {s.id}: subprocess command empty"))
        if s.kind == "builtin" and builtins is not None and s.builtin_name not in builtins:
            keyed.append((s.id, f"step {s.id}: unknown builtin: {s.builtin_name}"))

    cycle = _find_cycle(_adjacency(spec))
    if cycle is not None:
        path = "→".join(cycle + [cycle[0]])
        keyed.append((cycle[0], f"cycle: {path}"))

    keyed.sort()
    violations = tuple(msg for _, msg in keyed)
    return ValidationReport(ok=not violations, violations=violations)


def topological_order(spec: WorkflowSpec) -> list[str]:
    """Producer-before-consumer order; ties broken lexicographically."""
    adj = _adjacency(spec)
    indeg = {sid: 0 for sid in adj}
    for src, dsts in adj.items():
        for d in dsts:
            indeg[d] += 1
    heap = [sid for sid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order: list[str] = []
    while heap:
        sid = heapq.heappop(heap)
        order.append(sid)
        for d in sorted(adj[sid]):
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(heap, d)
    if len(order) != len(adj):
        raise CycleError("workflow graph contains a cycle")
    return order


def _render_param(value: object) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value)


def substitute_params(spec: WorkflowSpec, overrides: dict[str, object]) -> WorkflowSpec:
    """Replace ``${name}`` placeholders in step commands; returns a new spec."""
    known = spec.param_map
    for key in overrides:
        if key not in known:
            raise UnknownParamError(key)
    effective = {**known, **overrides}
    rendered = {k: _render_param(v) for k, v in effective.items()}

    def sub_token(token: str) -> str:
        return _PLACEHOLDER_RE.sub(
            lambda m: rendered.get(m.group(1), m.group(0)), token)

    steps = tuple(
        replace(s, command=tuple(sub_token(t) for t in s.command)) for s in spec.steps
    )
    return replace(spec, steps=steps, params=tuple(effective.items()))
