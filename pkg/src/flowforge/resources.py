"""Resource catalog: homogeneous execution classes with cost and speed."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import SchemaError


@dataclass(frozen=True)
class ResourceClass:
    id: str
    cores: int = 1
    mem_gb: float = 1.0
    gpus: int = 0
    cost_per_second: float = 0.0  # USD/s
    speed_factor: float = 1.0     # simulated backend only; 1.0 = baseline

    def __post_init__(self):
        if self.cores < 1 or self.gpus < 0:
            raise SchemaError(f"resource class {self.id}: bad cores/gpus")
        if not (math.isfinite(self.cost_per_second) and self.cost_per_second >= 0):
            raise SchemaError(f"resource class {self.id}: cost_per_second must be finite and >= 0")
        if not (math.isfinite(self.speed_factor) and self.speed_factor > 0):
            raise SchemaError(f"resource class {self.id}: speed_factor must be finite and > 0")

    def to_dict(self) -> dict:
        return {
            "id": self.id, "cores": self.cores, "mem_gb": self.mem_gb, "gpus": self.gpus,
            "cost_per_second": self.cost_per_second, "speed_factor": self.speed_factor,
        }


DEFAULT_CATALOG = (ResourceClass(id="local", cores=1, mem_gb=4.0, cost_per_second=0.0),)


class Catalog:
    def __init__(self, classes: list[ResourceClass] | tuple[ResourceClass, ...] = DEFAULT_CATALOG):
        ids = [rc.id for rc in classes]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate resource class ids")
        self._by_id = {rc.id: rc for rc in classes}

    def get(self, rc_id: str) -> ResourceClass | None:
        return self._by_id.get(rc_id)

    def __contains__(self, rc_id: str) -> bool:
        return rc_id in self._by_id

    def classes(self) -> list[ResourceClass]:
        return [self._by_id[k] for k in sorted(self._by_id)]

    @classmethod
    def load(cls, path: str | Path) -> "Catalog":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, list):
            raise SchemaError("resource catalog must be a JSON list")
        return cls([ResourceClass(**entry) for entry in doc])
