"""Environment-driven configuration knobs and their defaults."""

from __future__ import annotations

import os

DEFAULT_BROKER_ADDR = "127.0.0.1:7601"
DEFAULT_HTTP_ADDR = "127.0.0.1:7600"
DEFAULT_DATA_DIR = "./.flowforge"
DEFAULT_TRAIL_PERIOD_MS = 500

MAX_PAYLOAD_BYTES = 16 * 1024 * 1024
MAX_WORKERS = 64
UTILIZATION_HEADROOM = 0.8
RIDGE_LAMBDA = 1e-3
KNN_K = 3
TRAIL_WINDOW = 10
ANOMALY_Z_CUT = 3.0
FAULT_THRESHOLD = 0.75
FAULT_LEARNING_RATE = 0.05


def data_dir() -> str:
    return os.environ.get("FLOWFORGE_DATA_DIR", DEFAULT_DATA_DIR)


def broker_addr() -> str:
    return os.environ.get("FLOWFORGE_BROKER_ADDR", DEFAULT_BROKER_ADDR)


def http_addr() -> str:
    return os.environ.get("FLOWFORGE_HTTP_ADDR", DEFAULT_HTTP_ADDR)


def trail_period_ms() -> int:
    return int(os.environ.get("FLOWFORGE_TRAIL_PERIOD_MS", DEFAULT_TRAIL_PERIOD_MS))


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)
