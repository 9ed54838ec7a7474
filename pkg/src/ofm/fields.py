"""Vector fields G(t, u) acting on batches shaped (B, C, *S).

Every field can be evaluated plainly (``field(t, u)``), on a tape
(``field.traced(t, tensor)``) or through a vector-Jacobian product
(``field.vjp(t, u, v)``).  Besides the learned FNO field there are a few
closed-form fields used as oracles.
"""

from __future__ import annotations

import numpy as np

from . import diff as D
from .fno import OperatorParams, operator_forward


class VectorField:
    def traced(self, t, u: D.Tensor) -> D.Tensor:
        raise NotImplementedError

    def __call__(self, t, u: np.ndarray) -> np.ndarray:
        return self.traced(t, D.Tensor(np.asarray(u, dtype=float))).data

    def vjp(self, t, u: np.ndarray, cotangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (G(t, u), (dG/du)^T cotangent)."""
        tape = D.Tape(check_finite=False)
        x = tape.variable(np.asarray(u, dtype=float), "u")
        out = self.traced(t, x)
        (g,) = tape.gradients([out], [cotangent], [x])
        return out.data, g


class FNOField(VectorField):
    def __init__(self, params: OperatorParams):
        self.params = params

    @property
    def config(self):
        return self.params.config

    def traced(self, t, u):
        return operator_forward(self.params, t, u)


class ZeroField(VectorField):
    def traced(self, t, u):
        return u * 0.0

    def __call__(self, t, u):
        return np.zeros_like(np.asarray(u, dtype=float))


class ConstantField(VectorField):
    """G(t, u) = c, with ``c`` broadcastable to one function (C, *S)."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)

    def traced(self, t, u):
        return u * 0.0 + self.c


class ScalingField(VectorField):
    """G(t, u) = alpha * u."""

    def __init__(self, alpha: float):
        self.alpha = float(alpha)

    def traced(self, t, u):
        return u * self.alpha


class LinearField(VectorField):
    """G(t, u) = A u on the flattened function values; A is m x m."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=float)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise D.ShapeError(f"A must be square, got {self.A.shape}")

    def traced(self, t, u):
        shape = u.shape
        m = int(np.prod(shape[1:]))
        if m != self.A.shape[0]:
            raise D.ShapeError(f"field acts on {self.A.shape[0]} values, function has {m}")
        flat = D.reshape(u, (shape[0], m))
        return D.reshape(D.matmul(flat, self.A.T), shape)


def as_field(model) -> VectorField:
    if isinstance(model, VectorField):
        return model
    if isinstance(model, OperatorParams):
        return FNOField(model)
    raise TypeError(f"cannot use {type(model).__name__} as a vector field")
