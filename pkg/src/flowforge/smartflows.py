"""Analytics services over provenance data: runtime prediction, resource
selection, worker-count advice, failure forecasting, anomaly detection, and
a plug-in point for out-of-band domain analyses.

Runtime models are ridge regressions over the feature map
``[1, input_bytes, log1p(input_bytes)]`` with the intercept unpenalized,
falling back to k-nearest-neighbour averaging below 5 training samples.
The normal-equations solution is computed through an equivalent augmented
least-squares system, which keeps the solve well conditioned at byte-scale
feature magnitudes. Failure forecasting is an online logistic regression
over execution-trail statistics.

Models are recomputed on demand and cached against the provenance store's
metric watermark, so new data invalidates stale fits without a background
trainer.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config
from .adapters import StepContext, run_step
from .broker import Message
from .errors import (ExecutionFailed, InsufficientHistory, NoData, NoModels,
                     NoTrailData, UnknownService)
from .model import StepSpec
from .provenance import MetricRecord, ProvenanceStore, TrailSample, now_ms, summary_stats
from .resources import Catalog, ResourceClass

RUNTIME_FEATURES = ("1", "input_bytes", "log1p_input_bytes")
FAULT_FEATURES = ("1", "cpu_mean", "cpu_var", "mem_mean_gb", "queue_lag_mean", "attempt")


def runtime_features(input_bytes: float) -> np.ndarray:
    return np.array([1.0, float(input_bytes), math.log1p(float(input_bytes))])


def sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-min(60.0, max(-60.0, z))))


@dataclass
class PredictionModel:
    step_id: str
    resource_class: str
    kind: str  # "ridge" | "knn-fallback"
    weights: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lam: float = config.RIDGE_LAMBDA
    n_train: int = 0
    residual_stddev: float = 0.0
    train_bytes_mean: float = 0.0
    samples: list[tuple[float, float]] = field(default_factory=list)  # knn: (bytes, runtime)

    def to_dict(self) -> dict:
        return {
            "step_id": self.step_id, "resource_class": self.resource_class,
            "kind": self.kind, "weights": list(self.weights), "lambda": self.lam,
            "n_train": self.n_train, "residual_stddev": self.residual_stddev,
            "train_bytes_mean": self.train_bytes_mean,
            "samples": [list(s) for s in self.samples],
            "features": list(RUNTIME_FEATURES),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionModel":
        return cls(step_id=d["step_id"], resource_class=d["resource_class"], kind=d["kind"],
                   weights=tuple(d.get("weights", (0, 0, 0))), lam=d.get("lambda", config.RIDGE_LAMBDA),
                   n_train=d.get("n_train", 0), residual_stddev=d.get("residual_stddev", 0.0),
                   train_bytes_mean=d.get("train_bytes_mean", 0.0),
                   samples=[tuple(s) for s in d.get("samples", [])])


@dataclass
class FaultModel:
    weights: np.ndarray = field(default_factory=lambda: np.zeros(len(FAULT_FEATURES)))
    learning_rate: float = config.FAULT_LEARNING_RATE
    threshold: float = config.FAULT_THRESHOLD
    n_updates: int = 0

    def probability(self, x: np.ndarray) -> float:
        return sigmoid(float(self.weights @ x))

    def sgd_step(self, x: np.ndarray, fail: bool):
        p = self.probability(x)
        self.weights = self.weights - self.learning_rate * (p - (1.0 if fail else 0.0)) * x
        if not np.all(np.isfinite(self.weights)):
            raise ExecutionFailed("fault model weights diverged")
        self.n_updates += 1

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "learning_rate": self.learning_rate,
                "threshold": self.threshold, "n_updates": self.n_updates,
                "features": list(FAULT_FEATURES)}


@dataclass
class Recommendation:
    resource_class: str
    predicted_runtime_s: float
    predicted_cost: float
    feasible: bool
    alternatives: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"resource_class": self.resource_class,
                "predicted_runtime_s": self.predicted_runtime_s,
                "predicted_cost": self.predicted_cost, "feasible": self.feasible,
                "alternatives": self.alternatives}


def fault_window_features(window: list[TrailSample], width: int = config.TRAIL_WINDOW) -> np.ndarray:
    """Statistics over the last ``width`` samples, padded by repeating the first."""
    if not window:
        raise NoTrailData("empty trail window")
    samples = list(window)[-width:]
    while len(samples) < width:
        samples.insert(0, samples[0])
    cpu = np.array([s.cpu_util for s in samples])
    mem_gb = float(np.mean([s.mem_mb for s in samples])) / 1024.0
    lag = float(np.mean([s.queue_lag for s in samples]))
    return np.array([1.0, float(cpu.mean()), float(cpu.var()), mem_gb, lag,
                     float(samples[-1].attempt)])


class SmartFlows:
    def __init__(self, store: ProvenanceStore, catalog: Catalog, *,
                 ridge_lambda: float = config.RIDGE_LAMBDA, knn_k: int = config.KNN_K,
                 window: int = config.TRAIL_WINDOW,
                 headroom: float = config.UTILIZATION_HEADROOM,
                 max_workers: int = config.MAX_WORKERS,
                 fault_learning_rate: float = config.FAULT_LEARNING_RATE,
                 fault_threshold: float = config.FAULT_THRESHOLD,
                 fault_policy: str = "warn",
                 anomaly_z: float = config.ANOMALY_Z_CUT,
                 models_dir: str | Path | None = None,
                 engine=None, broker=None):
        self.store = store
        self.catalog = catalog
        self.ridge_lambda = ridge_lambda
        self.knn_k = knn_k
        self.window = window
        self.headroom = headroom
        self.max_workers = max_workers
        self.fault_policy = fault_policy
        self.anomaly_z = anomaly_z
        self.models_dir = Path(models_dir) if models_dir else None
        self.engine = engine
        self.broker = broker
        self.fault_model = FaultModel(learning_rate=fault_learning_rate,
                                      threshold=fault_threshold)
        self._fault_lock = threading.Lock()
        self._cache: dict[tuple[str, str, int], PredictionModel] = {}
        self._services: dict[str, StepSpec] = {}

    # -- training data -------------------------------------------------------------

    def _training_samples(self, step_id: str, resource_class: str) -> list[tuple[float, float]]:
        """(input_bytes, runtime_s) per succeeded task of (step, class)."""
        by_task: dict[tuple, dict[str, float]] = {}
        for metric in ("input_bytes", "runtime_s"):
            for rec in self.store.query_metrics(step_id=step_id, metric=metric):
                if rec.simulated or rec.resource_class != resource_class or rec.msg_id is None:
                    continue
                by_task.setdefault((rec.run_id, rec.msg_id, rec.attempt), {})[metric] = rec.value
        out = [(v["input_bytes"], v["runtime_s"]) for v in by_task.values()
               if "input_bytes" in v and "runtime_s" in v]
        out.sort()
        return out

    # -- prediction ------------------------------------------------------------------

    def fit_runtime_model(self, step_id: str, resource_class: str,
                          lam: float | None = None) -> PredictionModel:
        lam = self.ridge_lambda if lam is None else lam
        samples = self._training_samples(step_id, resource_class)
        if not samples:
            raise NoData(f"no succeeded runs for step={step_id} class={resource_class}")
        n = len(samples)
        bytes_mean = sum(b for b, _ in samples) / n
        if n < 5:
            return PredictionModel(step_id=step_id, resource_class=resource_class,
                                   kind="knn-fallback", n_train=n, samples=samples,
                                   train_bytes_mean=bytes_mean)
        X = np.stack([runtime_features(b) for b, _ in samples])
        y = np.array([r for _, r in samples])
        # ridge with unpenalized intercept, solved as an augmented least squares
        reg = np.zeros((2, 3))
        reg[0, 1] = reg[1, 2] = math.sqrt(lam)
        A = np.vstack([X, reg])
        b = np.concatenate([y, np.zeros(2)])
        w, *_ = np.linalg.lstsq(A, b, rcond=None)
        residuals = y - X @ w
        dof = max(n - 3, 1)
        stddev = math.sqrt(float(residuals @ residuals) / dof)
        return PredictionModel(step_id=step_id, resource_class=resource_class, kind="ridge",
                               weights=tuple(float(v) for v in w), lam=lam, n_train=n,
                               residual_stddev=stddev, train_bytes_mean=bytes_mean)

    def get_model(self, step_id: str, resource_class: str) -> PredictionModel:
        key = (step_id, resource_class, self.store.metric_watermark())
        model = self._cache.get(key)
        if model is None:
            model = self.fit_runtime_model(step_id, resource_class)
            self._cache[key] = model
            self.export_model(model)
        return model

    def import_model(self, model: PredictionModel):
        """Pin a model (e.g. loaded from its JSON export) ahead of any refit."""
        key = (model.step_id, model.resource_class, self.store.metric_watermark())
        self._cache[key] = model

    def export_model(self, model: PredictionModel):
        if self.models_dir is None:
            return
        path = self.models_dir / model.step_id / f"{model.resource_class}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(model.to_dict(), sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")

    def predict_runtime(self, step_id: str, resource_class: str,
                        input_bytes: float) -> dict:
        model = self.get_model(step_id, resource_class)
        if model.kind == "ridge":
            raw = float(np.dot(model.weights, runtime_features(input_bytes)))
            return {"estimate_s": max(0.0, raw), "stddev_s": model.residual_stddev,
                    "kind": model.kind}
        # knn: nearest by |delta bytes|, ties resolved toward smaller inputs
        ranked = sorted(model.samples, key=lambda s: (abs(s[0] - input_bytes), s[0]))
        neighbors = [r for _, r in ranked[:self.knn_k]]
        est = sum(neighbors) / len(neighbors)
        stddev = summary_stats(neighbors)["stddev"]
        return {"estimate_s": max(0.0, est), "stddev_s": stddev, "kind": model.kind}

    # -- optimization -------------------------------------------------------------------

    def select_resource(self, step_id: str, input_bytes: float, deadline_s: float,
                        catalog: list[ResourceClass] | None = None) -> Recommendation:
        classes = catalog if catalog is not None else self.catalog.classes()
        if not classes:
            raise NoModels("empty resource catalog")
        scored = []
        for rc in classes:
            try:
                est = self.predict_runtime(step_id, rc.id, input_bytes)["estimate_s"]
            except NoData:
                continue
            cost = est * rc.cost_per_second
            scored.append({"resource_class": rc.id, "predicted_runtime_s": est,
                           "predicted_cost": cost, "feasible": est <= deadline_s})
        if not scored:
            raise NoModels(f"no class has data for step {step_id}")
        feasible = [s for s in scored if s["feasible"]]
        feasible.sort(key=lambda s: (s["predicted_cost"], s["predicted_runtime_s"],
                                     s["resource_class"]))
        infeasible = [s for s in scored if not s["feasible"]]
        infeasible.sort(key=lambda s: (s["predicted_runtime_s"], s["resource_class"]))
        ranking = feasible + infeasible
        chosen = ranking[0]
        return Recommendation(resource_class=chosen["resource_class"],
                              predicted_runtime_s=chosen["predicted_runtime_s"],
                              predicted_cost=chosen["predicted_cost"],
                              feasible=bool(feasible), alternatives=ranking)

    def advise_workers(self, step_id: str, resource_class: str, pending_items: int,
                       deadline_s: float) -> int:
        if pending_items < 0 or deadline_s <= 0:
            raise ValueError("pending_items >= 0 and deadline_s > 0 required")
        model = self.get_model(step_id, resource_class)
        t_hat = self.predict_runtime(step_id, resource_class, model.train_bytes_mean)["estimate_s"]
        raw = math.ceil(pending_items * t_hat / (deadline_s * self.headroom))
        return min(self.max_workers, max(1, raw))

    # -- fault tolerance -------------------------------------------------------------------

    def update_fault_model(self, trail_window: list[TrailSample], outcome: str) -> FaultModel:
        x = fault_window_features(trail_window, self.window)
        with self._fault_lock:
            self.fault_model.sgd_step(x, fail=(outcome == "Failed"))
            return self.fault_model

    def forecast_failure(self, run_id: str, step_id: str, actor: str = "smartflows") -> dict:
        samples = self.store.query_trail(run_id=run_id, step_id=step_id)
        if not samples:
            raise NoTrailData(f"no trail for run={run_id} step={step_id}")
        latest_attempt = max(s.attempt for s in samples)
        window = [s for s in samples if s.attempt == latest_attempt]
        x = fault_window_features(window, self.window)
        with self._fault_lock:
            p = self.fault_model.probability(x)
            threshold = self.fault_model.threshold
        alert = p >= threshold
        action = self.fault_policy if alert else "none"
        if alert:
            self.store.append_event(run_id, "FaultForecast", {
                "step_id": step_id, "p_fail": p, "threshold": threshold,
                "action": action, "attempt": latest_attempt, "actor": actor,
            })
            if action == "preempt" and self.engine is not None:
                self.engine.preempt_step(run_id, step_id)
        return {"p_fail": p, "alert": alert, "action": action}

    def detect_anomaly(self, step_id: str, runtime_s: float,
                       run_id: str | None = None) -> dict:
        values = [r.value for r in self.store.query_metrics(step_id=step_id, metric="runtime_s")
                  if not r.simulated]
        if len(values) < 5:
            raise InsufficientHistory(
                f"need >= 5 succeeded runtimes for {step_id}, have {len(values)}")
        stats = summary_stats(values)
        if stats["stddev"] == 0.0:
            z = 0.0 if runtime_s == stats["mean"] else math.inf
        else:
            z = (runtime_s - stats["mean"]) / stats["stddev"]
        anomalous = abs(z) >= self.anomaly_z
        if anomalous:
            self.store.append_event(run_id or "_analytics", "AnomalyDetected", {
                "step_id": step_id, "runtime_s": runtime_s, "z": z if math.isfinite(z) else None,
                "mean": stats["mean"], "stddev": stats["stddev"],
            })
        return {"z": z, "anomalous": anomalous}

    # -- domain services -----------------------------------------------------------------------

    def register_domain_service(self, name: str, *, command: tuple[str, ...] = (),
                                builtin_name: str | None = None, timeout_s: float = 3600.0):
        kind = "subprocess" if command else "builtin"
        self._services[name] = StepSpec(id=name, kind=kind, command=tuple(command),
                                        builtin_name=builtin_name, timeout_s=timeout_s)

    def invoke_domain_service(self, name: str, payload: bytes,
                              publish_to: str | None = None) -> bytes:
        step = self._services.get(name)
        if step is None:
            raise UnknownService(name)
        run_id = f"_svc.{name}"
        ctx = StepContext(run_id=run_id, step_id=name, attempt=1)
        outcome = run_step(step, payload, ctx)
        self._record_service_metrics(run_id, name, payload, outcome)
        if not outcome.ok:
            raise ExecutionFailed(outcome.error or "domain service failed")
        outputs = [p for _, p in outcome.outputs]
        if publish_to is not None and self.broker is not None:
            for p in outputs:
                self.broker.publish(publish_to, p, headers={"producer_step": name})
        return outputs[0] if outputs else b""

    def _record_service_metrics(self, run_id: str, name: str, payload: bytes, outcome):
        def put(metric, value, unit):
            self.store.append_metric(MetricRecord(
                run_id=run_id, step_id=name, attempt=1, metric=metric, value=value,
                unit=unit, msg_id=f"svc-{now_ms()}", resource_class="local"))

        put("input_bytes", float(len(payload)), "bytes")
        if outcome.ok:
            put("runtime_s", outcome.runtime_s, "s")
            put("output_bytes", float(sum(len(p) for _, p in outcome.outputs)), "bytes")
        for key, value, unit in outcome.custom_metrics:
            put(key, value, unit)
