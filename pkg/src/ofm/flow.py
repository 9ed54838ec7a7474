"""Flow matching: training the vector field, pushing functions through the
flow, and exact or stochastic log-densities via the augmented ODE.

Sign convention: ``FlowTrace.div_integral`` is the integral of the
divergence of G from ``t0`` to ``t1`` (negative length when t1 < t0).
Integrating from t=1 back to t=0 therefore gives
``log p(u1) = log N(u0; 0, K) + div_integral``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diff as D
from .batch import FunctionBatch
from .fields import FNOField, VectorField, as_field
from .fno import FNOConfig, OperatorParams, init_params, operator_forward
from .gp import GPPrior, cholesky_sample, gaussian_logpdf
from .optim import Adam, cosine_lr
from .ot import couple_minibatch
from .rng import make_rng
from .solvers import SolverConfig, solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CFMConfig:
    sigma_min: float = 1e-4
    batch_size: int = 64
    epochs: int = 100
    lr: float = 1e-3
    lr_final: float = 0.0
    optimizer: str = "adam"
    coupling: str = "ot"
    checkpoint_every: int = 0
    divergence_limit: float = 1e6
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.sigma_min < 0:
            raise ValueError("sigma_min must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.coupling not in ("ot", "independent"):
            raise ValueError(f"coupling must be 'ot' or 'independent', got {self.coupling!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DivergenceConfig:
    mode: str = "exact"
    n_probes: int = 32
    probe: str = "rademacher"
    seed: int | None = None
    chunk: int = 512  # max replicated rows per VJP

    def __post_init__(self):
        if self.mode not in ("exact", "hutchinson"):
            raise ValueError(f"divergence mode must be exact or hutchinson, got {self.mode!r}")
        if self.n_probes < 1:
            raise ValueError("n_probes must be >= 1")
        if self.probe not in ("rademacher", "gaussian"):
            raise ValueError(f"probe law must be rademacher or gaussian, got {self.probe!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowTrace:
    state: np.ndarray
    div_integral: np.ndarray | None
    nfe: int
    step_history: list = field(default_factory=list)
    rejected: int = 0
    # per-probe integrals, shape (n_probes, B), hutchinson mode only
    div_samples: np.ndarray | None = None


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint: OperatorParams | None, epoch: int):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.epoch = epoch


@dataclass
class TrainResult:
    params: OperatorParams
    loss_history: list
    checkpoints: list  # (epoch, OperatorParams)
    step_losses: list = field(default_factory=list)


# -- divergence ----------------------------------------------------------------

def draw_probes(shape, cfg: DivergenceConfig, rng) -> np.ndarray:
    rng = make_rng(rng)
    if cfg.probe == "rademacher":
        return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0
    return rng.standard_normal(shape)


def _quad_forms(fld: VectorField, t, u: np.ndarray, vecs: np.ndarray, chunk: int):
    """G(t, u) and v^T (dG/du) v for every v in ``vecs`` (K, B, ...) -> (K, B)."""
    k, bsz = vecs.shape[:2]
    rows = max(1, chunk // bsz)
    quads = np.empty((k, bsz))
    value = None
    for s in range(0, k, rows):
        v = vecs[s:s + rows]
        r = len(v)
        uu = np.broadcast_to(u, (r,) + u.shape).reshape((r * bsz,) + u.shape[1:])
        out, g = fld.vjp(t, uu, v.reshape((r * bsz,) + u.shape[1:]))
        quads[s:s + r] = np.sum((g * v.reshape(g.shape)).reshape(r, bsz, -1), axis=-1)
        if value is None:
            value = out[:bsz]
    return value, quads


def _basis(bsz: int, shape) -> np.ndarray:
    m = int(np.prod(shape))
    eye = np.eye(m).reshape((m, 1) + tuple(shape))
    return np.broadcast_to(eye, (m, bsz) + tuple(shape))


def divergence(model, t, u, cfg: DivergenceConfig = DivergenceConfig(), rng=None, probes=None):
    """Divergence of G(t, .) at u.

    ``u`` is one function (C, *S) or a batch (B, C, *S); returns a float or
    a length-B array.  Exact mode sums m diagonal Jacobian entries obtained
    from m VJPs; hutchinson mode averages eps^T J eps over probes.
    """
    fld = as_field(model)
    u = np.asarray(u, dtype=float)
    single = _is_single(fld, u)
    ub = (u.reshape((1, 1, -1)) if u.ndim == 1 else u[None]) if single else u
    if cfg.mode == "exact":
        _, q = _quad_forms(fld, t, ub, _basis(len(ub), ub.shape[1:]), cfg.chunk)
    else:
        if probes is None:
            probes = draw_probes((cfg.n_probes,) + ub.shape, cfg, rng if rng is not None else cfg.seed)
        _, q = _quad_forms(fld, t, ub, probes, cfg.chunk)
    res = q.sum(axis=0) if cfg.mode == "exact" else q.mean(axis=0)
    return float(res[0]) if single else res


def _is_single(fld, u: np.ndarray) -> bool:
    if isinstance(fld, FNOField):
        return u.ndim == fld.config.dims + 1
    # closed-form fields: (m,) or (C, m) is one function, (B, C, *S) a batch
    return u.ndim <= 2


# -- integration ---------------------------------------------------------------

def integrate(model, u_start, t0: float, t1: float, solver: SolverConfig = SolverConfig(),
              with_divergence: DivergenceConfig | None = None, rng=None) -> FlowTrace:
    """Solve du/dt = G(t, u) from t0 to t1 for a batch (B, C, *S)."""
    if not (0.0 <= t0 <= 1.0 and 0.0 <= t1 <= 1.0):
        raise ValueError(f"t0, t1 must lie in [0, 1], got {t0}, {t1}")
    fld = as_field(model)
    u0 = np.asarray(u_start.values if isinstance(u_start, FunctionBatch) else u_start, dtype=float)
    if u0.ndim < 2:
        raise D.ShapeError(f"expected a batch (B, C, *S), got shape {u0.shape}")
    bsz = len(u0)

    if with_divergence is None:
        def rhs(t, y):
            return (fld(t, y[0]),)
        res = solve(rhs, (u0,), t0, t1, solver)
        return FlowTrace(res.state[0], None, res.nfe, res.steps, res.rejected)

    cfg = with_divergence
    if cfg.mode == "exact":
        vecs = _basis(bsz, u0.shape[1:])
        acc0 = np.zeros(bsz)
    else:
        vecs = draw_probes((cfg.n_probes,) + u0.shape, cfg, rng if rng is not None else cfg.seed)
        acc0 = np.zeros((cfg.n_probes, bsz))

    def rhs(t, y):
        g, q = _quad_forms(fld, t, y[0], vecs, cfg.chunk)
        return g, (q.sum(axis=0) if cfg.mode == "exact" else q)

    res = solve(rhs, (u0, acc0), t0, t1, solver, control=(0,))
    u_end, acc = res.state
    if cfg.mode == "exact":
        return FlowTrace(u_end, acc, res.nfe, res.steps, res.rejected)
    return FlowTrace(u_end, acc.mean(axis=0), res.nfe, res.steps, res.rejected, div_samples=acc)


def sample_prior(model, ref: GPPrior, count: int, solver: SolverConfig = SolverConfig(), rng=None,
                 batch_size: int = 256) -> tuple[FunctionBatch, float]:
    """Draw u0 from the reference GP and push it to t=1; returns (samples, mean NFE)."""
    rng = make_rng(rng)
    out, nfes = [], []
    for s in range(0, count, batch_size):
        n = min(batch_size, count - s)
        u0 = cholesky_sample(ref, n, rng)
        tr = integrate(model, u0, 0.0, 1.0, solver)
        out.append(tr.state)
        nfes.append((tr.nfe, n))
    vals = np.concatenate(out) if out else np.zeros((0, ref.grid.channels) + ref.grid.points)
    mean_nfe = sum(a * n for a, n in nfes) / max(count, 1)
    return FunctionBatch(vals, ref.grid), mean_nfe


@dataclass
class Likelihood:
    value: np.ndarray
    stderr: np.ndarray | None
    u0: np.ndarray
    nfe: int


def log_likelihood_detail(model, u1, ref: GPPrior, solver: SolverConfig = SolverConfig(),
                          div_cfg: DivergenceConfig = DivergenceConfig(), rng=None) -> Likelihood:
    u = np.asarray(u1.values if isinstance(u1, FunctionBatch) else u1, dtype=float)
    shape = (ref.grid.channels,) + ref.grid.points
    if u.shape == shape:
        u = u[None]
    elif u.shape[1:] != shape:
        raise D.ShapeError(f"values of shape {u.shape} do not match the reference grid {shape}")
    tr = integrate(model, u, 1.0, 0.0, solver, with_divergence=div_cfg, rng=rng)
    value = np.asarray(gaussian_logpdf(tr.state, ref)).reshape(-1) + tr.div_integral
    stderr = None
    if tr.div_samples is not None:
        k = tr.div_samples.shape[0]
        stderr = tr.div_samples.std(axis=0, ddof=1) / np.sqrt(k) if k > 1 else np.full(len(u), np.inf)
    return Likelihood(value, stderr, tr.state, tr.nfe)


def log_likelihood(model, u1, ref: GPPrior, solver: SolverConfig = SolverConfig(),
                   div_cfg: DivergenceConfig = DivergenceConfig(), rng=None):
    """log p(u1) under the flow prior; float for one function, array for a batch."""
    single = np.shape(u1.values if isinstance(u1, FunctionBatch) else u1) == (ref.grid.channels,) + ref.grid.points
    res = log_likelihood_detail(model, u1, ref, solver, div_cfg, rng)
    return float(res.value[0]) if single else res.value


# -- training ------------------------------------------------------------------

def cfm_loss(model, coupled, ref: GPPrior, cfg: CFMConfig, rng=None, t=None):
    """Conditional flow-matching loss on coupled pairs ``(h0, h1)``.

    Returns ``(loss, grads)``; ``grads`` maps parameter names to arrays when
    ``model`` is an :class:`OperatorParams`, and is None otherwise.
    """
    h0, h1 = (np.asarray(x) for x in coupled)
    if h0.shape != h1.shape:
        raise D.ShapeError(f"pair shapes differ: {h0.shape} vs {h1.shape}")
    bsz = len(h0)
    rng = make_rng(rng)
    tt = rng.uniform(0.0, 1.0, size=bsz) if t is None else np.broadcast_to(np.asarray(t, dtype=float), (bsz,))
    tb = tt.reshape((bsz,) + (1,) * (h0.ndim - 1))
    ht = tb * h1 + (1.0 - tb) * h0
    if cfg.sigma_min > 0:
        ht = ht + cfg.sigma_min * cholesky_sample(ref, bsz, rng).reshape(h0.shape).astype(h0.dtype)
    target = h1 - h0

    tape = D.Tape(check_finite=False)
    if isinstance(model, OperatorParams):
        tracked = {k: tape.variable(v, k) for k, v in model.tensors.items()}
        pred = operator_forward(tracked, tt, ht, model.config)
    else:
        tracked = None
        pred = as_field(model).traced(tt, D.Tensor(ht))
    r = pred - target
    sq = r * r
    per_pair = np.mean(sq.data.reshape(bsz, -1), axis=1)
    bad = np.flatnonzero(~np.isfinite(per_pair))
    if len(bad):
        raise FloatingPointError(f"non-finite flow-matching loss at pair index {int(bad[0])}")
    loss = D.mean(sq)
    if tracked is None:
        return float(loss.data), None
    names = list(tracked)
    grads = tape.gradients([loss], [np.ones((), dtype=loss.data.dtype)], [tracked[k] for k in names])
    return float(loss.data), dict(zip(names, grads))


def train_prior(dataset, ref: GPPrior, cfm: CFMConfig, init, rng=None,
                callback: Callable | None = None) -> TrainResult:
    """Learn G by minibatch conditional flow matching.

    ``init`` is an :class:`OperatorParams` (used as the starting point, not
    modified) or an :class:`FNOConfig` (initialized from ``rng``).
    """
    data = np.asarray(dataset.values if isinstance(dataset, FunctionBatch) else dataset)
    shape = (ref.grid.channels,) + ref.grid.points
    if data.shape[1:] != shape:
        raise D.ShapeError(f"dataset functions have shape {data.shape[1:]}, reference grid {shape}")
    b = cfm.batch_size
    if len(data) < b:
        raise ValueError(f"dataset has {len(data)} functions, fewer than batch size {b}")
    rng = make_rng(cfm.seed if rng is None else rng)
    if isinstance(init, FNOConfig):
        init.check_grid(ref.grid.points)
        params = init_params(init, rng)
    else:
        params = init.copy()
    dtype = np.dtype(cfm.dtype)
    params = params.astype(dtype)
    data = data.astype(dtype, copy=False)

    per_epoch = len(data) // b
    total = per_epoch * cfm.epochs
    opt = Adam(cfm.lr)
    history, step_losses, checkpoints = [], [], []
    last_good = params.copy()
    step = 0
    for epoch in range(cfm.epochs):
        order = rng.permutation(len(data))
        losses = []
        for i in range(per_epoch):
            h1 = data[order[i * b:(i + 1) * b]]
            h0 = cholesky_sample(ref, b, rng).astype(dtype)
            if cfm.coupling == "ot":
                h0, h1, _ = couple_minibatch(h0, h1)
            try:
                loss, grads = cfm_loss(params, (h0, h1), ref, cfm, rng)
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), last_good, epoch) from exc
            if loss > cfm.divergence_limit:
                raise TrainingDiverged(f"loss {loss:.3e} exceeded {cfm.divergence_limit:g} at epoch {epoch}",
                                       last_good, epoch)
            opt.step(params.tensors, grads, cosine_lr(step, total, cfm.lr, cfm.lr_final))
            step += 1
            losses.append(loss)
            step_losses.append(loss)
        history.append(float(np.mean(losses)))
        last_good = params.copy()
        if cfm.checkpoint_every and (epoch + 1) % cfm.checkpoint_every == 0:
            checkpoints.append((epoch + 1, params.copy()))
        if callback is not None:
            callback(epoch, history[-1], params)
        log.debug("epoch %d loss %.5g", epoch, history[-1])
    if not checkpoints or checkpoints[-1][0] != cfm.epochs:
        checkpoints.append((cfm.epochs, params.copy()))
    return TrainResult(params, history, checkpoints, step_losses)
