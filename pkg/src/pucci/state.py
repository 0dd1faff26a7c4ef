"""Vector-valued states ``(u_1, ..., u_n)`` sampled on a common grid."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SystemState:
    grid: Any
    values: np.ndarray  # shape (n, *grid.shape)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape[1:] != tuple(self.grid.shape):
            raise GridMismatchError(f"state shape {vals.shape[1:]} does not match grid {self.grid.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_fields(cls, fields) -> "SystemState":
        fields = list(fields)
        grid = fields[0].grid
        for fld in fields[1:]:
            require_same_grid(grid, fld.grid)
        return cls(grid, np.stack([fld.values for fld in fields]))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.values[i]

    def norms(self) -> list[float]:
        return [float(np.max(np.abs(v))) for v in self.values]

    def scaled(self, c: float) -> "SystemState":
        return SystemState(self.grid, c * self.values)

    def distance(self, other: "SystemState") -> float:
        require_same_grid(self.grid, other.grid)
        return float(np.max(np.abs(self.values - other.values)))


def require_same_grid(g1, g2):
    if g1 is g2:
        return
    if g1 != g2:
        raise GridMismatchError(f"grid mismatch: {g1!r} vs {g2!r}")
