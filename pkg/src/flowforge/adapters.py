"""Step adapters: subprocess and builtin execution of a single message.

Subprocess contract: the command receives the message payload on stdin and
writes one JSON object per line on stdout, ``{"channel": <id>, "payload":
<json>}``; lines starting with ``#`` are step logging and are ignored. The
pseudo-channel ``_metrics`` turns the record's payload into ``custom.*``
metric emissions instead of queue output. Steps with no declared output
channels write to the implicit ``_sink`` channel.
"""

from __future__ import annotations

import json
import os
import subprocess
import time
from dataclasses import dataclass, field

from .model import StepSpec

METRICS_CHANNEL = "_metrics"
SINK_CHANNEL = "_sink"


class BuiltinFailure(Exception):
    """Raised by a builtin to mark the attempt Failed."""


@dataclass
class StepContext:
    run_id: str = ""
    step_id: str = ""
    attempt: int = 1
    broker_addr: str = ""
    custom_metrics: list[tuple[str, float, str]] = field(default_factory=list)

    def emit_metric(self, key: str, value: float, unit: str = ""):
        if not key.startswith("custom."):
            key = "custom." + key
        self.custom_metrics.append((key, float(value), unit))


@dataclass
class ExecOutcome:
    ok: bool
    timed_out: bool = False
    exit_code: int | None = None
    outputs: list[tuple[str, bytes]] = field(default_factory=list)  # (channel, payload)
    custom_metrics: list[tuple[str, float, str]] = field(default_factory=list)
    error: str | None = None
    runtime_s: float = 0.0
    cpu_s: float | None = None


# -- builtin registry ----------------------------------------------------------

def _builtin_identity(payload: bytes, ctx: StepContext):
    return [(None, payload)]


def _builtin_upper(payload: bytes, ctx: StepContext):
    return [(None, payload.upper())]


def _builtin_tag(payload: bytes, ctx: StepContext):
    doc = json.loads(payload.decode("utf-8"))
    if not isinstance(doc, dict):
        doc = {"value": doc}
    doc.setdefault("path", []).append(ctx.step_id)
    return [(None, json.dumps(doc, sort_keys=True, separators=(",", ":")).encode())]


def _builtin_sleep(payload: bytes, ctx: StepContext):
    doc = json.loads(payload.decode("utf-8"))
    time.sleep(float(doc.get("sleep_s", 0.0)))
    return [(None, payload)]


def _builtin_fail(payload: bytes, ctx: StepContext):
    raise BuiltinFailure("fail builtin always fails")


def _builtin_flaky(payload: bytes, ctx: StepContext):
    doc = json.loads(payload.decode("utf-8"))
    if ctx.attempt < int(doc.get("succeed_on_attempt", 2)):
        raise BuiltinFailure(f"flaky failure on attempt {ctx.attempt}")
    return [(None, payload)]


def _builtin_emit_metrics(payload: bytes, ctx: StepContext):
    doc = json.loads(payload.decode("utf-8"))
    for key, value in doc.get("metrics", {}).items():
        ctx.emit_metric(key, value)
    out = doc.get("forward", doc)
    return [(None, json.dumps(out, sort_keys=True, separators=(",", ":")).encode())]


BUILTINS = {
    "identity": _builtin_identity,
    "upper": _builtin_upper,
    "tag": _builtin_tag,
    "sleep": _builtin_sleep,
    "fail": _builtin_fail,
    "flaky": _builtin_flaky,
    "emit_metrics": _builtin_emit_metrics,
}


def builtin_names() -> set[str]:
    return set(BUILTINS)


def effective_outputs(step: StepSpec) -> tuple[str, ...]:
    return step.outputs if step.outputs else (SINK_CHANNEL,)


# -- execution ------------------------------------------------------------------

def run_step(step: StepSpec, payload: bytes, ctx: StepContext) -> ExecOutcome:
    """Execute one message through a step; never raises for step failures."""
    if step.kind == "builtin":
        return _run_builtin(step, payload, ctx)
    return _run_subprocess(step, payload, ctx)


def _run_builtin(step: StepSpec, payload: bytes, ctx: StepContext) -> ExecOutcome:
    fn = BUILTINS.get(step.builtin_name or "")
    if fn is None:
        return ExecOutcome(ok=False, exit_code=None, error=f"unknown builtin: {step.builtin_name}")
    targets = effective_outputs(step)
    start = time.monotonic()
    cpu_start = time.thread_time()
    try:
        raw_outputs = fn(payload, ctx)
    except BuiltinFailure as e:
        return ExecOutcome(ok=False, exit_code=1, error=str(e),
                           runtime_s=time.monotonic() - start,
                           custom_metrics=list(ctx.custom_metrics))
    except Exception as e:  # builtin bug counts as a step failure, not an engine crash
        return ExecOutcome(ok=False, exit_code=1, error=f"{type(e).__name__}: {e}",
                           runtime_s=time.monotonic() - start,
                           custom_metrics=list(ctx.custom_metrics))
    elapsed = time.monotonic() - start
    cpu_s = time.thread_time() - cpu_start
    if elapsed > step.timeout_s:
        return ExecOutcome(ok=False, timed_out=True, error="timeout", runtime_s=elapsed)
    outputs: list[tuple[str, bytes]] = []
    for channel, data in raw_outputs:
        if channel is None:
            outputs.extend((t, data) for t in targets)
        else:
            outputs.append((channel, data))
    return ExecOutcome(ok=True, exit_code=0, outputs=outputs,
                       custom_metrics=list(ctx.custom_metrics),
                       runtime_s=elapsed, cpu_s=cpu_s)


def _run_subprocess(step: StepSpec, payload: bytes, ctx: StepContext) -> ExecOutcome:
    targets = effective_outputs(step)
    env = dict(os.environ)
    env.update({
        "FLOWFORGE_RUN_ID": ctx.run_id,
        "FLOWFORGE_STEP_ID": ctx.step_id,
        "FLOWFORGE_ATTEMPT": str(ctx.attempt),
        "FLOWFORGE_BROKER_ADDR": ctx.broker_addr,
        "FLOWFORGE_OUTPUT_CHANNELS": ",".join(targets),
    })
    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            list(step.command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            stderr=subprocess.PIPE, env=env,
        )
    except OSError as e:
        return ExecOutcome(ok=False, exit_code=None, error=f"spawn failed: {e}")
    ctx_pid_cb = getattr(ctx, "on_spawn", None)
    if ctx_pid_cb:
        ctx_pid_cb(proc.pid)
    try:
        stdout, stderr = proc.communicate(payload, timeout=step.timeout_s)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.communicate()
        return ExecOutcome(ok=False, timed_out=True, error="timeout",
                           runtime_s=time.monotonic() - start)
    elapsed = time.monotonic() - start
    if proc.returncode != 0:
        tail = stderr.decode("utf-8", "replace")[-500:]
        return ExecOutcome(ok=False, exit_code=proc.returncode,
                           error=f"exit {proc.returncode}: {tail}".strip(),
                           runtime_s=elapsed)

    outputs: list[tuple[str, bytes]] = []
    custom: list[tuple[str, float, str]] = list(ctx.custom_metrics)
    for line in stdout.splitlines():
        line = line.strip()
        if not line or line.startswith(b"#"):
            continue
        try:
            rec = json.loads(line)
            channel = rec["channel"]
            body = rec["payload"]
        except (json.JSONDecodeError, KeyError, TypeError):
            return ExecOutcome(
                ok=False, exit_code=proc.returncode, runtime_s=elapsed,
                error=f"output protocol violation: {line[:200].decode('utf-8', 'replace')}")
        if channel == METRICS_CHANNEL:
            if isinstance(body, dict):
                for key, value in body.items():
                    if isinstance(value, (int, float)) and not isinstance(value, bool):
                        k = key if key.startswith("custom.") else "custom." + key
                        custom.append((k, float(value), ""))
            continue
        if channel not in targets:
            return ExecOutcome(
                ok=False, exit_code=proc.returncode, runtime_s=elapsed,
                error=f"output protocol violation: undeclared channel {channel!r}")
        outputs.append((channel, json.dumps(body, sort_keys=True, separators=(",", ":")).encode()))
    return ExecOutcome(ok=True, exit_code=0, outputs=outputs, custom_metrics=custom,
                       runtime_s=elapsed)
