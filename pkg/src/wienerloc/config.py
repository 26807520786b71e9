"""Run configuration: one flat dataclass, JSON round-trip, stable hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .timegrid import InvalidArgument


@dataclass(frozen=True)
class RunConfig:
    t_end: float = 1.0
    m: int = 64
    model: str = "heisenberg"
    delta: float = 0.25
    delta_list: tuple[float, ...] | None = None
    center: tuple[float, ...] = (0.0, 0.0)
    radius: float = 1.0
    lambda_star: float = 0.25
    gamma: float = 0.1
    n_paths: int = 10_000
    n_inner: int = 16
    seed: int = 0
    lambdas: tuple[float, ...] = (0.5, 1.0, 2.0, 5.0)
    out_dir: str = "runs"

    def __post_init__(self):
        if self.m < 1 or self.n_paths < 1 or self.t_end <= 0:
            raise InvalidArgument("m, n_paths, t_end must be positive")
        if not 0 <= self.gamma < 0.5:
            raise InvalidArgument("gamma must lie in [0, 1/2)")

    @property
    def deltas(self) -> tuple[float, ...]:
        return self.delta_list if self.delta_list else (self.delta,)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        for key in ("delta_list", "center", "lambdas"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def digest(self) -> str:
        # identifies the computation, not where its artifacts are written
        data = dataclasses.asdict(self)
        data.pop("out_dir")
        blob = json.dumps(data, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
