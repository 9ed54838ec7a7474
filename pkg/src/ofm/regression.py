"""Functional regression with a flow prior.

Functions are represented through their latent reference-GP variable ``a``
with ``u = Phi_1(a)``.  The posterior is explored with Langevin dynamics in
latent space and pushed forward through the flow.

Two posterior targets are available:

``exact_reparam``
    log N(a; 0, K) - misfit(Phi_1(a)).  This is the data-space posterior
    written in latent coordinates; the change-of-variables Jacobian cancels.
``paper_eq17``
    log p(Phi_1(a)) - misfit(Phi_1(a)), i.e. the data-space log-posterior
    evaluated at the pushforward and differentiated with respect to ``a``.
    It differs from the first target by the divergence integral along the
    path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from . import diff as D
from .fields import VectorField, ZeroField, as_field
from .flow import DivergenceConfig, draw_probes, log_likelihood_detail
from .gp import GPPrior, gaussian_logpdf, precision_matvec
from .optim import Adam
from .rng import make_rng
from .solvers import SolverConfig

log = logging.getLogger(__name__)

MODES = ("exact_reparam", "paper_eq17")


@dataclass(frozen=True)
class ObservationSet:
    indices: np.ndarray
    values: np.ndarray
    noise_std: float
    size: int | None = None  # number of grid values, checked when known

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int).reshape(-1)
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        if len(idx) != len(vals):
            raise ValueError(f"{len(idx)} indices but {len(vals)} values")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("observation indices must be unique")
        # zero noise is allowed for bookkeeping; posterior evaluation needs > 0
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be >= 0")
        if len(idx) and idx.min() < 0:
            raise IndexError("negative observation index")
        if self.size is not None:
            if len(idx) > self.size:
                raise ValueError(f"{len(idx)} observations exceed {self.size} grid values")
            if len(idx) and idx.max() >= self.size:
                raise IndexError(f"observation index {idx.max()} outside grid of {self.size} values")

    def __len__(self) -> int:
        return len(self.indices)

    def check(self, m: int) -> None:
        if not self.noise_std > 0:
            raise ValueError("posterior evaluation needs noise_std > 0")
        if len(self) and self.indices.max() >= m:
            raise IndexError(f"observation index {self.indices.max()} outside grid of {m} values")

    def misfit(self, u_flat: np.ndarray) -> np.ndarray:
        r = self.values - u_flat[..., self.indices]
        return np.sum(r * r, axis=-1) / (2.0 * self.noise_std ** 2)

    def to_dict(self) -> dict:
        return {"indices": self.indices.tolist(), "values": self.values.tolist(), "noise_std": self.noise_std}


@dataclass(frozen=True)
class SGLDConfig:
    n_iter: int = 40_000
    burn_in: int = 3_000
    thin: int = 10
    temperature: float = 1.0
    lr_init: float = 5e-3
    lr_final: float = 4e-3
    mode: str = "exact_reparam"
    integrator: str = "semi_implicit"
    n_chains: int = 1
    rk4_steps: int = 50
    curvature_refresh: int = 0  # 0: curvature fixed at the start point
    map_steps: int = 200
    map_lr: float = 1e-2
    grad_probes: int = 1
    max_abs: float = 1e6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", self.mode.replace("-", "_"))
        object.__setattr__(self, "integrator", self.integrator.replace("-", "_"))
        if self.mode not in MODES:
            raise ValueError(f"posterior mode must be one of {MODES}, got {self.mode!r}")
        if self.integrator not in ("explicit", "semi_implicit"):
            raise ValueError(f"integrator must be explicit or semi_implicit, got {self.integrator!r}")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError(f"need 0 <= burn_in < n_iter, got {self.burn_in}, {self.n_iter}")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError("learning rate must be positive and non-increasing")
        if self.n_chains < 1 or self.rk4_steps < 1 or self.grad_probes < 1:
            raise ValueError("n_chains, rk4_steps and grad_probes must be >= 1")

    def lr(self, t) -> np.ndarray:
        """Exponential interpolation from lr_init (t=0) to lr_final (t=n_iter)."""
        return self.lr_init * (self.lr_final / self.lr_init) ** (np.asarray(t) / self.n_iter)

    @property
    def n_samples(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        return asdict(self)


class ChainDiverged(RuntimeError):
    def __init__(self, msg, diagnostics: dict):
        super().__init__(msg)
        self.diagnostics = diagnostics


@dataclass
class PosteriorChain:
    latent: np.ndarray  # (S, C, *points), chains concatenated
    logpost: np.ndarray  # (S,)
    chain_id: np.ndarray  # (S,)
    pushforward_fn: Callable | None = field(default=None, repr=False)
    _push: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.latent)

    @property
    def pushforward(self) -> np.ndarray:
        if self._push is None:
            if self.pushforward_fn is None:
                self._push = self.latent
            else:
                self._push = self.pushforward_fn(self.latent)
        return self._push


# -- flow map on a tape ----------------------------------------------------------

def _batch_sum(x: D.Tensor) -> D.Tensor:
    return D.tsum(x, axis=tuple(range(1, x.ndim)))


def flow_map_traced(fld: VectorField, a: D.Tensor, steps: int) -> D.Tensor:
    """Phi_1(a) by fixed-step RK4, recorded on a's tape."""
    if isinstance(fld, ZeroField):
        return a
    h = 1.0 / steps
    y = a
    for i in range(steps):
        t = i * h
        k1 = fld.traced(t, y)
        k2 = fld.traced(t + 0.5 * h, y + k1 * (0.5 * h))
        k3 = fld.traced(t + 0.5 * h, y + k2 * (0.5 * h))
        k4 = fld.traced(min(t + h, 1.0), y + k3 * h)
        y = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    return y


def flow_with_divergence_traced(fld: VectorField, a: D.Tensor, steps: int, probes: np.ndarray,
                                delta: float = 1e-4):
    """Phi_1(a) and a stochastic estimate of the path integral of div G.

    eps^T J eps is approximated by the central difference
    eps^T (G(y + d eps) - G(y - d eps)) / (2 d), which only needs first-order
    reverse mode when differentiated with respect to ``a``.  ``probes`` has
    shape (K, B, C, *S).
    """
    if isinstance(fld, ZeroField):
        return a, _batch_sum(a) * 0.0
    k, bsz = probes.shape[:2]
    flat_probes = probes.reshape((k * bsz,) + a.shape[1:])
    h = 1.0 / steps

    def stage(t, y):
        rep = D.reshape(D.broadcast_to(D.reshape(y, (1,) + y.shape), (k,) + y.shape), (k * bsz,) + y.shape[1:])
        stacked = D.concat([y, rep + flat_probes * delta, rep - flat_probes * delta], axis=0)
        out = fld.traced(t, stacked)
        g = D.getitem(out, slice(0, bsz))
        plus = D.getitem(out, slice(bsz, bsz + k * bsz))
        minus = D.getitem(out, slice(bsz + k * bsz, None))
        q = _batch_sum((plus - minus) * flat_probes) * (1.0 / (2.0 * delta))
        return g, D.mean(D.reshape(q, (k, bsz)), axis=0)

    y = a
    acc = None
    for i in range(steps):
        t = i * h
        k1, d1 = stage(t, y)
        k2, d2 = stage(t + 0.5 * h, y + k1 * (0.5 * h))
        k3, d3 = stage(t + 0.5 * h, y + k2 * (0.5 * h))
        k4, d4 = stage(min(t + h, 1.0), y + k3 * h)
        y = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
        inc = (d1 + d2 * 2.0 + d3 * 2.0 + d4) * (h / 6.0)
        acc = inc if acc is None else acc + inc
    return y, acc


def push_forward(model, a: np.ndarray, steps: int = 50, chunk: int = 256) -> np.ndarray:
    """Phi_1 by fixed-step RK4, in batches of ``chunk``."""
    fld = as_field(model)
    a = np.asarray(a, dtype=float)
    if isinstance(fld, ZeroField):
        return a.copy()
    out = [flow_map_traced(fld, D.Tensor(a[s:s + chunk]), steps).data for s in range(0, len(a), chunk)]
    return np.concatenate(out) if out else a.copy()


# -- log posterior ---------------------------------------------------------------

def _rk4_steps(solver: SolverConfig | None, default: int = 50) -> int:
    return solver.steps if solver is not None and solver.kind == "rk4" else default


def _posterior_terms(fld, a: np.ndarray, obs: ObservationSet, ref: GPPrior, steps: int, mode: str,
                     probes: np.ndarray | None, grad: bool):
    """Value (B,), gradient (B, ...) and pushforward for a latent batch."""
    bsz = len(a)
    tape = D.Tape(check_finite=False)
    at = tape.variable(a, "a")
    if mode == "exact_reparam":
        u = flow_map_traced(fld, at, steps)
        div = None
    else:
        u, div = flow_with_divergence_traced(fld, at, steps, probes)
    uf = u.data.reshape(bsz, -1)
    obs.check(uf.shape[1])
    r = obs.values - uf[:, obs.indices]
    misfit = np.sum(r * r, axis=1) / (2.0 * obs.noise_std ** 2)
    prior = np.asarray(gaussian_logpdf(a, ref)).reshape(bsz)
    value = prior - misfit - (div.data if div is not None else 0.0)
    if not grad:
        return value, None, u.data
    cot_u = np.zeros_like(uf)
    cot_u[:, obs.indices] = r / obs.noise_std ** 2
    outs, cots = [u], [cot_u.reshape(u.shape)]
    if div is not None:
        outs.append(div)
        cots.append(-np.ones(bsz))
    if u is at and div is None:
        g = cots[0]
    else:
        (g,) = tape.gradients(outs, cots, [at])
    g = g - precision_matvec(ref, a)
    return value, g, u.data


def _as_batch(a: np.ndarray, ref: GPPrior):
    shape = (ref.grid.channels,) + ref.grid.points
    a = np.asarray(a, dtype=float)
    if a.shape == shape or a.size == ref.n * ref.grid.channels and a.ndim <= 1:
        return a.reshape((1,) + shape), True
    if a.shape[1:] != shape:
        raise D.ShapeError(f"latent of shape {a.shape} does not match the query grid {shape}")
    return a, False


def log_posterior(model, a_latent, obs: ObservationSet, ref: GPPrior, solver: SolverConfig | None = None,
                  div_cfg: DivergenceConfig | None = None, mode: str = "exact_reparam", rng=None,
                  grad: bool = False):
    """Unnormalized log-posterior of a latent function (or batch).

    In ``paper_eq17`` mode the value uses :func:`log_likelihood` with
    ``div_cfg`` on the pushforward; the gradient, when requested, uses the
    finite-difference Hutchinson path estimate instead.
    """
    mode = mode.replace("-", "_")
    if mode not in MODES:
        raise ValueError(f"posterior mode must be one of {MODES}, got {mode!r}")
    fld = as_field(model)
    a, single = _as_batch(a_latent, ref)
    steps = _rk4_steps(solver)
    obs.check(a[0].size)
    if mode == "exact_reparam":
        value, g, _ = _posterior_terms(fld, a, obs, ref, steps, mode, None, grad)
    else:
        u = push_forward(fld, a, steps)
        r = obs.values - u.reshape(len(u), -1)[:, obs.indices]
        misfit = np.sum(r * r, axis=1) / (2.0 * obs.noise_std ** 2)
        lik = log_likelihood_detail(fld, u, ref, solver or SolverConfig.rk4(steps),
                                    div_cfg or DivergenceConfig("hutchinson"), rng)
        value = lik.value - misfit
        g = None
        if grad:
            rng = make_rng(rng)
            probes = draw_probes((1,) + a.shape, DivergenceConfig("hutchinson"), rng)
            _, g, _ = _posterior_terms(fld, a, obs, ref, steps, mode, probes, True)
    if single:
        value = float(value[0])
        g = None if g is None else g[0]
    return (value, g) if grad else value


def map_estimate(model, obs: ObservationSet, ref: GPPrior, solver: SolverConfig | None = None,
                 steps: int = 200, lr: float = 1e-2, mode: str = "exact_reparam", rng=None,
                 init: np.ndarray | None = None, return_trace: bool = False):
    """Adam ascent on the log-posterior from a = 0; returns the best iterate."""
    fld = as_field(model)
    mode = mode.replace("-", "_")
    rng = make_rng(rng)
    shape = (ref.grid.channels,) + ref.grid.points
    a = np.zeros((1,) + shape) if init is None else np.array(init, dtype=float).reshape((1,) + shape)
    k = _rk4_steps(solver)
    opt = Adam(lr)
    params = {"a": a}
    best_val, best = -np.inf, a.copy()
    trace = []
    for i in range(steps + 1):
        probes = draw_probes((1,) + a.shape, DivergenceConfig("hutchinson"), rng) if mode == "paper_eq17" else None
        val, g, _ = _posterior_terms(fld, params["a"], obs, ref, k, mode, probes, True)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite log-posterior gradient at MAP step {i}")
        v = float(val[0])
        trace.append(v)
        if v > best_val:
            best_val, best = v, params["a"].copy()
        if i < steps:
            opt.step(params, {"a": g}, maximize=True)
    out = best[0]
    return (out, trace) if return_trace else out


# -- Langevin sampling -------------------------------------------------------------

def _obs_jacobian(fld, a: np.ndarray, obs: ObservationSet, steps: int) -> np.ndarray:
    """Rows d u_i / d a for observed indices, per chain: (B, n, m)."""
    bsz = len(a)
    m = a[0].size
    n = len(obs)
    if isinstance(fld, ZeroField):
        J = np.zeros((n, m))
        J[np.arange(n), obs.indices] = 1.0
        return np.broadcast_to(J, (bsz, n, m)).copy()
    J = np.empty((bsz, n, m))
    tape = D.Tape(check_finite=False)
    at = tape.variable(a, "a")
    u = flow_map_traced(fld, at, steps)
    for j, idx in enumerate(obs.indices):
        cot = np.zeros((bsz, m))
        cot[:, idx] = 1.0
        (g,) = tape.gradients([u], [cot.reshape(u.shape)], [at])
        J[:, j] = g.reshape(bsz, m)
    return J


def _implicit_solver(J: np.ndarray, c: float):
    """Apply (I + c J^T J)^{-1} per chain via the n x n Woodbury system."""
    n = J.shape[1]
    small = np.eye(n) + c * np.einsum("bim,bjm->bij", J, J)
    factors = [linalg.cho_factor(s) for s in small]

    def apply(v: np.ndarray) -> np.ndarray:
        vf = v.reshape(len(J), -1)
        jv = np.einsum("bim,bm->bi", J, vf)
        w = np.stack([linalg.cho_solve(f, x) for f, x in zip(factors, jv)])
        return (vf - c * np.einsum("bim,bi->bm", J, w)).reshape(v.shape)

    return apply


def sgld_chain(model, obs: ObservationSet, ref: GPPrior, sgld: SGLDConfig = SGLDConfig(),
               solver: SolverConfig | None = None, div_cfg: DivergenceConfig | None = None,
               rng=None, init: np.ndarray | None = None, progress: Callable | None = None) -> PosteriorChain:
    """Langevin dynamics on the latent reference-GP variable.

    ``integrator='explicit'`` is the plain update
    a <- a + (eta/2) grad + sqrt(eta T) xi.  ``'semi_implicit'`` treats the
    Gauss-Newton curvature H = J^T J / sigma^2 of the observation misfit
    with the trapezoidal rule: (I + eta H / 4) da = (eta/2) grad + sqrt(eta T) xi.
    This keeps the step stable when eta / sigma^2 is large and is exact in
    distribution along directions where the target is Gaussian with
    curvature H.

    The chain starts at ``init`` (default: the MAP estimate).  Every
    ``thin``-th iterate after ``burn_in`` is recorded.
    """
    fld = as_field(model)
    rng = make_rng(sgld.seed if rng is None else rng)
    steps = solver.steps if solver is not None and solver.kind == "rk4" else sgld.rk4_steps
    shape = (ref.grid.channels,) + ref.grid.points
    obs.check(int(np.prod(shape)))
    if init is None:
        init = map_estimate(fld, obs, ref, SolverConfig.rk4(steps), sgld.map_steps, sgld.map_lr, sgld.mode, rng)
    init = np.asarray(init, dtype=float)
    C = sgld.n_chains
    a = np.broadcast_to(init.reshape((-1,) + shape), (C,) + shape).copy()

    semi = sgld.integrator == "semi_implicit" and len(obs) > 0
    J = _obs_jacobian(fld, a, obs, steps) if semi else None
    inv_s2 = 1.0 / obs.noise_std ** 2
    apply_inv = None
    cur_lr = None

    n_rec = sgld.n_samples
    lat = np.empty((n_rec, C) + shape)
    rec = 0
    noise_scale = sgld.temperature
    for t in range(sgld.n_iter):
        eta = float(sgld.lr(t))
        probes = None
        if sgld.mode == "paper_eq17":
            probes = draw_probes((sgld.grad_probes,) + a.shape, DivergenceConfig("hutchinson"), rng)
        val, g, _ = _posterior_terms(fld, a, obs, ref, steps, sgld.mode, probes, True)
        step = 0.5 * eta * g
        if noise_scale > 0:
            step = step + math.sqrt(eta * noise_scale) * rng.standard_normal(a.shape)
        if semi:
            if sgld.curvature_refresh and t and t % sgld.curvature_refresh == 0:
                J = _obs_jacobian(fld, a, obs, steps)
                apply_inv = None
            if apply_inv is None or cur_lr is None or abs(eta - cur_lr) > 1e-3 * cur_lr:
                apply_inv = _implicit_solver(J, 0.25 * eta * inv_s2)
                cur_lr = eta
            step = apply_inv(step)
        a = a + step
        big = float(np.max(np.abs(a)))
        if not np.isfinite(big) or big > sgld.max_abs:
            raise ChainDiverged(
                f"chain diverged at iteration {t}: max |a| = {big:.3e}",
                {"iteration": t, "max_abs": big, "lr": eta, "last_logpost": val.tolist()})
        if t + 1 - sgld.burn_in > 0 and (t + 1 - sgld.burn_in) % sgld.thin == 0 and rec < n_rec:
            lat[rec] = a
            # log-posterior of the recorded iterate is evaluated lazily below
            rec += 1
        if progress is not None and (t + 1) % 1000 == 0:
            progress(t + 1, val)

    # per-sample log-posterior values of the recorded iterates (chains interleaved by record)
    flat_lat = lat.transpose((1, 0) + tuple(range(2, lat.ndim))).reshape((C * n_rec,) + shape)
    chain_id = np.repeat(np.arange(C), n_rec)
    pushed = None
    vals = []
    pushed_parts = []
    for s in range(0, len(flat_lat), 256):
        chunk = flat_lat[s:s + 256]
        probes = None
        if sgld.mode == "paper_eq17":
            probes = draw_probes((sgld.grad_probes,) + chunk.shape, DivergenceConfig("hutchinson"), rng)
        v, _, u = _posterior_terms(fld, chunk, obs, ref, steps, sgld.mode, probes, False)
        vals.append(v)
        pushed_parts.append(u)
    if pushed_parts:
        pushed = np.concatenate(pushed_parts)
    lp = np.concatenate(vals) if vals else np.zeros(0)
    chain = PosteriorChain(flat_lat, lp, chain_id)
    chain._push = pushed
    if not np.all(np.isfinite(lp)):
        raise ChainDiverged("non-finite log-posterior in recorded samples", {"count": int(np.sum(~np.isfinite(lp)))})
    return chain


def summarize_posterior(chain) -> dict:
    """Pointwise mean, population std and 5/95 quantiles of the pushforwards."""
    samples = chain.pushforward if isinstance(chain, PosteriorChain) else np.asarray(chain, dtype=float)
    if len(samples) == 0:
        raise ValueError("empty chain")
    if len(samples) < 2:
        raise ValueError("need at least two samples to summarize")
    return {
        "mean": samples.mean(axis=0),
        "std": samples.std(axis=0),
        "q05": np.quantile(samples, 0.05, axis=0),
        "q95": np.quantile(samples, 0.95, axis=0),
    }


def merge_chains(chains: list[PosteriorChain]) -> PosteriorChain:
    offsets = np.cumsum([0] + [int(c.chain_id.max()) + 1 if len(c) else 0 for c in chains])
    merged = PosteriorChain(
        np.concatenate([c.latent for c in chains]),
        np.concatenate([c.logpost for c in chains]),
        np.concatenate([c.chain_id + o for c, o in zip(chains, offsets)]),
    )
    merged._push = np.concatenate([c.pushforward for c in chains])
    return merged
