"""Discretized functions sharing one grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gp import GridSpec


@dataclass
class FunctionBatch:
    """``values`` has shape (B, C, *grid.points)."""

    values: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        self.values = np.asarray(self.values)
        expected = (self.grid.channels,) + self.grid.points
        if self.values.ndim != len(expected) + 1 or self.values.shape[1:] != expected:
            raise ValueError(f"values of shape {self.values.shape} do not fit grid (B, {expected})")

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, idx) -> "FunctionBatch":
        vals = self.values[idx]
        if vals.ndim == self.values.ndim - 1:
            vals = vals[None]
        return FunctionBatch(vals, self.grid)

    def flat(self) -> np.ndarray:
        return self.values.reshape(len(self), -1)
