"""Small latency / penalty distributions used across the simulator.

Config files describe these as ``{kind: ..., ...}`` mappings; everything is
in seconds once loaded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Dist:
    """Constant, uniform or exponential draw over seconds."""

    kind: str = "constant"
    value: float = 0.0
    low: float = 0.0
    high: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "exponential"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "uniform" and self.high < self.low:
            raise ValueError("uniform distribution needs high >= low")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        return float(rng.exponential(self.value))

    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.low + self.high)
        return self.value

    def to_config(self, scale: float = 1.0) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value * scale}
        if self.kind == "uniform":
            return {"kind": "uniform", "low": self.low * scale,
                    "high": self.high * scale}
        return {"kind": "exponential", "value": self.value * scale}

    @classmethod
    def from_config(cls, raw: dict | int | float, scale: float = 1.0) -> "Dist":
        """Parse a config mapping; bare numbers mean a constant."""
        if isinstance(raw, (int, float)):
            return cls("constant", value=float(raw) * scale)
        kind = raw.get("kind", "constant")
        if kind == "uniform":
            return cls("uniform", low=float(raw["low"]) * scale,
                       high=float(raw["high"]) * scale)
        return cls(kind, value=float(raw["value"]) * scale)


CONSTANT_ZERO = Dist("constant", value=0.0)
