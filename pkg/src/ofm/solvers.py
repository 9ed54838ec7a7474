"""Fixed-step RK4 and adaptive Dormand-Prince 5(4) on tuples of arrays.

The right-hand side maps ``(t, state) -> derivative`` where ``state`` is a
tuple of numpy arrays.  Only the components listed in ``control`` enter the
adaptive error norm, so auxiliary accumulators (e.g. a divergence integral)
ride along without changing the step sequence.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

State = tuple
Rhs = Callable[[float, State], State]


class SolverError(RuntimeError):
    pass


class BudgetExceeded(SolverError):
    pass


class StepUnderflow(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    kind: str = "dopri45"
    steps: int = 100
    atol: float = 1e-5
    rtol: float = 1e-5
    max_evals: int = 100_000
    first_step: float | None = None

    def __post_init__(self):
        aliases = {"rk4_fixed": "rk4", "dopri45_adaptive": "dopri45", "dopri5": "dopri45"}
        object.__setattr__(self, "kind", aliases.get(self.kind, self.kind))
        if self.kind not in ("rk4", "dopri45"):
            raise ValueError(f"unknown solver kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.atol <= 0 or self.rtol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")

    @classmethod
    def rk4(cls, steps: int = 100) -> "SolverConfig":
        return cls(kind="rk4", steps=steps)

    @classmethod
    def dopri(cls, tol: float = 1e-5, **kw) -> "SolverConfig":
        return cls(kind="dopri45", atol=tol, rtol=tol, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolveResult:
    state: State
    nfe: int
    steps: list = field(default_factory=list)  # accepted step sizes
    rejected: int = 0


def _axpy(y: State, h: float, ks: Sequence[State], coeffs: Sequence[float]) -> State:
    out = []
    for i, yi in enumerate(y):
        acc = yi.copy() if isinstance(yi, np.ndarray) else np.array(yi, dtype=float)
        for c, k in zip(coeffs, ks):
            if c:
                acc = acc + (h * c) * k[i]
        out.append(acc)
    return tuple(out)


def rk4(rhs: Rhs, y0: State, t0: float, t1: float, steps: int, max_evals: int = 10 ** 9) -> SolveResult:
    """Classical four-stage Runge-Kutta with ``steps`` uniform steps."""
    if 4 * steps > max_evals:
        raise BudgetExceeded(f"rk4 with {steps} steps needs {4 * steps} evaluations > budget {max_evals}")
    h = (t1 - t0) / steps
    y = tuple(np.asarray(v, dtype=float) for v in y0)
    t = t0
    for i in range(steps):
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, _axpy(y, h, [k1], [0.5]))
        k3 = rhs(t + 0.5 * h, _axpy(y, h, [k2], [0.5]))
        # land exactly on t1 at the last stage
        tn = t1 if i == steps - 1 else t0 + (i + 1) * h
        k4 = rhs(tn, _axpy(y, h, [k3], [1.0]))
        y = _axpy(y, h, [k1, k2, k3, k4], [1 / 6, 1 / 3, 1 / 3, 1 / 6])
        t = tn
    return SolveResult(y, 4 * steps, [h] * steps)


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b - b4 for b, b4 in zip(_B, _B4))

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
# PI controller exponents (Hairer & Wanner style, order 5 pair)
BETA1 = 0.7 / 5
BETA2 = 0.4 / 5


def _err_norm(err: State, y0: State, y1: State, atol: float, rtol: float, control: Sequence[int]) -> float:
    total, count = 0.0, 0
    for i in control:
        scale = atol + rtol * np.maximum(np.abs(y0[i]), np.abs(y1[i]))
        r = err[i] / scale
        total += float(np.sum(r * r))
        count += np.size(r)
    return float(np.sqrt(total / max(count, 1)))


def _initial_step(rhs, t0, y0, f0, direction, atol, rtol, control, span):
    # Hairer, Norsett & Wanner, Solving ODEs I, sec. II.4
    def nrm(x, y):
        return float(np.sqrt(np.mean(np.concatenate(
            [np.ravel(x[i] / (atol + rtol * np.abs(y[i]))) for i in control]) ** 2)))
    d0, d1 = nrm(y0, y0), nrm(f0, y0)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = _axpy(y0, direction * h0, [f0], [1.0])
    f1 = rhs(t0 + direction * h0, y1)
    d2 = nrm(tuple(a - b for a, b in zip(f1, f0)), y0) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def dopri45(rhs: Rhs, y0: State, t0: float, t1: float, atol: float = 1e-5, rtol: float = 1e-5,
            max_evals: int = 100_000, first_step: float | None = None,
            control: Sequence[int] = (0,)) -> SolveResult:
    """Adaptive Dormand-Prince 5(4) with PI step-size control (FSAL)."""
    y = tuple(np.asarray(v, dtype=float) for v in y0)
    span = abs(t1 - t0)
    if span == 0:
        return SolveResult(y, 0)
    direction = 1.0 if t1 > t0 else -1.0
    t = t0
    f = rhs(t, y)
    nfe = 1
    if first_step is None:
        h = _initial_step(rhs, t, y, f, direction, atol, rtol, control, span)
        nfe += 1
    else:
        h = min(abs(first_step), span)
    steps: list[float] = []
    rejected = 0
    err_prev = 1e-4
    min_h = 1e-12 * max(1.0, span)
    while direction * (t1 - t) > 0:
        if nfe + 6 > max_evals:
            raise BudgetExceeded(f"dopri45 used {nfe} evaluations (budget {max_evals}) at t={t:.6g}")
        if h < min_h:
            raise StepUnderflow(f"step size {h:.3e} underflowed at t={t:.6g}")
        last = h >= abs(t1 - t)
        if last:
            h = abs(t1 - t)
        hs = direction * h
        ks = [f]
        for s in range(1, 7):
            ys = _axpy(y, hs, ks, _A[s])
            ts = t1 if (last and _C[s] == 1.0) else t + _C[s] * hs
            ks.append(rhs(ts, ys))
        nfe += 6
        # stage 7 is evaluated at the 5th-order solution (FSAL)
        y_new = _axpy(y, hs, ks[:6], _B[:6])
        err = tuple(hs * sum(e * k[i] for e, k in zip(_E, ks) if e) for i in range(len(y)))
        en = _err_norm(err, y, y_new, atol, rtol, control)
        if not np.isfinite(en):
            en = np.inf
        if en <= 1.0:
            t = t1 if last else t + hs
            y = y_new
            f = ks[6]
            steps.append(hs)
            if en == 0:
                factor = MAX_FACTOR
            else:
                factor = SAFETY * en ** (-BETA1) * err_prev ** BETA2
                factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
            err_prev = max(en, 1e-4)
            h = h * factor
        else:
            rejected += 1
            factor = 0.1 if not np.isfinite(en) else max(MIN_FACTOR, SAFETY * en ** (-1 / 5))
            h = h * factor
    return SolveResult(y, nfe, steps, rejected)


def solve(rhs: Rhs, y0: State, t0: float, t1: float, cfg: SolverConfig, control: Sequence[int] = (0,)) -> SolveResult:
    if cfg.kind == "rk4":
        return rk4(rhs, y0, t0, t1, cfg.steps, cfg.max_evals)
    return dopri45(rhs, y0, t0, t1, cfg.atol, cfg.rtol, cfg.max_evals, cfg.first_step, control)
