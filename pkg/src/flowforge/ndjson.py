"""Append-only NDJSON files with a configurable fsync policy."""

from __future__ import annotations

import errno
import json
import os
import time
from pathlib import Path

from .errors import StorageFull


class AppendLog:
    """One JSON object per line; ``fsync`` is ``always`` or ``interval:<ms>``."""

    def __init__(self, path: str | Path, fsync: str = "interval:100", header: dict | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "ab")
        self._always = fsync == "always"
        self._interval_s = 0.1
        if fsync.startswith("interval:"):
            self._interval_s = int(fsync.split(":", 1)[1]) / 1000.0
        self._last_sync = time.monotonic()
        if fresh and header is not None:
            self.write(header)

    def write(self, record: dict):
        data = json.dumps(record, separators=(",", ":")).encode() + b"\n"
        try:
            self._fh.write(data)
            self._fh.flush()
            now = time.monotonic()
            if self._always or now - self._last_sync >= self._interval_s:
                os.fsync(self._fh.fileno())
                self._last_sync = now
        except OSError as e:
            if e.errno == errno.ENOSPC:
                raise StorageFull(str(self.path)) from e
            raise

    def close(self):
        try:
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError:
            pass
        self._fh.close()


def read_records(path: str | Path, skip_header: bool = False) -> list[dict]:
    """Read every intact record; a torn tail line (crash) is dropped."""
    out: list[dict] = []
    with open(path, "rb") as fh:
        for i, raw in enumerate(fh):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError:
                break
            if skip_header and i == 0:
                continue
            out.append(rec)
    return out
