"""Exception hierarchy shared across FlowForge modules.

Every error carries a short machine-readable ``code`` used verbatim in the
broker wire protocol and the gateway error envelope.
"""

from __future__ import annotations


class FlowforgeError(Exception):
    """Base class; ``code`` is the stable wire identifier."""

    code = "ERROR"

    def __init__(self, detail: str = ""):
        super().__init__(detail)
        self.detail = detail


# --- workflow-model ---------------------------------------------------------

class WorkflowSyntaxError(FlowforgeError):
    code = "SYNTAX"

    def __init__(self, detail: str, line: int | None = None):
        super().__init__(detail)
        self.line = line


class SchemaError(FlowforgeError):
    code = "SCHEMA"


class CycleError(FlowforgeError):
    code = "CYCLE"


class UnknownParamError(FlowforgeError):
    code = "UNKNOWN_PARAM"


# --- queue-broker -----------------------------------------------------------

class QueueFull(FlowforgeError):
    code = "QUEUE_FULL"


class UnknownQueue(FlowforgeError):
    code = "UNKNOWN_QUEUE"


class PayloadTooLarge(FlowforgeError):
    code = "PAYLOAD_TOO_LARGE"


class UnknownMessage(FlowforgeError):
    code = "UNKNOWN_MESSAGE"


# --- provenance-store -------------------------------------------------------

class InvalidRecord(FlowforgeError):
    code = "INVALID_RECORD"


class StorageFull(FlowforgeError):
    code = "STORAGE_FULL"


class NoData(FlowforgeError):
    code = "NO_DATA"


class UnknownRun(FlowforgeError):
    code = "UNKNOWN_RUN"


# --- executor ---------------------------------------------------------------

class SpecInvalid(FlowforgeError):
    code = "SPEC_INVALID"


class BrokerUnavailable(FlowforgeError):
    code = "BROKER_UNAVAILABLE"


class ResourceClassUnknown(FlowforgeError):
    code = "RESOURCE_CLASS_UNKNOWN"


class SpawnError(FlowforgeError):
    code = "SPAWN_ERROR"


class TimeoutExceeded(FlowforgeError):
    code = "TIMEOUT"


class OutputProtocolError(FlowforgeError):
    code = "OUTPUT_PROTOCOL"


class InvalidTransition(FlowforgeError):
    code = "INVALID_TRANSITION"


class UnknownStep(FlowforgeError):
    code = "UNKNOWN_STEP"


class GateBlocked(FlowforgeError):
    code = "GATE_BLOCKED"

    def __init__(self, detail: str, report: dict | None = None):
        super().__init__(detail)
        self.report = report or {}


# --- ppods-ledger -----------------------------------------------------------

class WrongPhase(FlowforgeError):
    code = "WRONG_PHASE"


class DuplicateId(FlowforgeError):
    code = "DUPLICATE_ID"


class InvalidTarget(FlowforgeError):
    code = "INVALID_TARGET"


class MissingReports(FlowforgeError):
    code = "MISSING_REPORTS"


class MissingConsensus(FlowforgeError):
    code = "MISSING_CONSENSUS"


class ExecutionFailed(FlowforgeError):
    code = "EXECUTION_FAILED"


# --- smartflows -------------------------------------------------------------

class NoModels(FlowforgeError):
    code = "NO_MODELS"


class InsufficientHistory(FlowforgeError):
    code = "INSUFFICIENT_HISTORY"


class NoTrailData(FlowforgeError):
    code = "NO_TRAIL_DATA"


class UnknownService(FlowforgeError):
    code = "UNKNOWN_SERVICE"
