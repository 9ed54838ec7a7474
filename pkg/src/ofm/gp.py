"""Gaussian-process priors on regular point collections."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

LOG_2PI = math.log(2.0 * math.pi)
JITTER_SCHEDULE = (1e-10, 1e-8, 1e-6)


class CholeskyError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "matern"
    length_scale: float = 0.01
    smoothness: float = 0.5
    variance: float = 1.0
    gibbs_l0: float = 0.05
    gibbs_l1: float = 0.25
    rq_alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("matern", "gibbs", "rational_quadratic"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.variance <= 0:
            raise ValueError("variance must be > 0")
        if self.kind == "matern":
            if self.smoothness not in (0.5, 1.5, 2.5):
                raise ValueError(f"matern smoothness must be 0.5, 1.5 or 2.5, got {self.smoothness}")
            if self.length_scale <= 0:
                raise ValueError("length_scale must be > 0")
        elif self.kind == "rational_quadratic":
            if self.length_scale <= 0 or self.rq_alpha <= 0:
                raise ValueError("rational quadratic needs length_scale > 0 and alpha > 0")
        elif self.gibbs_l0 <= 0:
            raise ValueError("gibbs_l0 must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid: ``points`` cells per axis, node ``j`` at
    ``lo + j * (hi - lo) / points``.  Points flatten row-major."""

    points: tuple[int, ...] = (128,)
    bounds: tuple[tuple[float, float], ...] = ((0.0, 1.0),)
    channels: int = 1

    def __post_init__(self):
        pts = tuple(int(p) for p in np.atleast_1d(self.points))
        bounds = tuple((float(lo), float(hi)) for lo, hi in np.reshape(np.asarray(self.bounds, dtype=float), (-1, 2)))
        if len(bounds) == 1 and len(pts) > 1:
            bounds = bounds * len(pts)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "bounds", bounds)
        if len(bounds) != len(pts):
            raise ValueError(f"{len(pts)} axes but {len(bounds)} bounds")
        if min(pts) < 1:
            raise ValueError("need at least one point per axis")
        if any(hi <= lo for lo, hi in bounds):
            raise ValueError("bounds must satisfy lo < hi")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @property
    def dims(self) -> int:
        return len(self.points)

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    def axis(self, i: int) -> np.ndarray:
        lo, hi = self.bounds[i]
        n = self.points[i]
        return lo + np.arange(n) * (hi - lo) / n

    def coordinates(self) -> np.ndarray:
        """Flattened points, shape (size, dims)."""
        axes = [self.axis(i) for i in range(self.dims)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def with_points(self, points: Sequence[int]) -> "GridSpec":
        return GridSpec(tuple(points), self.bounds, self.channels)

    def to_dict(self) -> dict:
        return {"points": list(self.points), "bounds": [list(b) for b in self.bounds], "channels": self.channels}


def _matern(d, l, nu, var):
    r = d / l
    if nu == 0.5:
        return var * np.exp(-r)
    if nu == 1.5:
        s = math.sqrt(3.0) * r
        return var * (1.0 + s) * np.exp(-s)
    s = math.sqrt(5.0) * r
    return var * (1.0 + s + s * s / 3.0) * np.exp(-s)


def _gibbs_length(cfg: KernelConfig, x):
    # the length-scale law is defined on the first coordinate
    ell = cfg.gibbs_l0 + cfg.gibbs_l1 * x
    if np.any(ell <= 0):
        raise ValueError("gibbs length scale l0 + l1*x must be positive on the domain")
    return ell


def kernel_matrix(cfg: KernelConfig, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Covariances between point sets of shape (na, d) and (nb, d)."""
    xa = np.atleast_2d(np.asarray(xa, dtype=float))
    xb = np.atleast_2d(np.asarray(xb, dtype=float))
    diff = xa[:, None, :] - xb[None, :, :]
    if cfg.kind == "gibbs":
        la = _gibbs_length(cfg, xa[:, 0])[:, None]
        lb = _gibbs_length(cfg, xb[:, 0])[None, :]
        s = la * la + lb * lb
        sq = np.sum(diff * diff, axis=-1)
        return cfg.variance * np.sqrt(2.0 * la * lb / s) * np.exp(-sq / s)
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    if cfg.kind == "matern":
        return _matern(d, cfg.length_scale, cfg.smoothness, cfg.variance)
    a = cfg.rq_alpha
    return cfg.variance * (1.0 + d * d / (2.0 * a * cfg.length_scale ** 2)) ** (-a)


def kernel_eval(cfg: KernelConfig, x, x2) -> float:
    return float(kernel_matrix(cfg, np.atleast_1d(np.asarray(x, dtype=float))[None, :],
                               np.atleast_1d(np.asarray(x2, dtype=float))[None, :])[0, 0])


@dataclass(frozen=True)
class GPPrior:
    kernel: KernelConfig
    grid: GridSpec
    gram: np.ndarray = field(repr=False)
    chol: np.ndarray = field(repr=False)
    jitter: float

    @property
    def n(self) -> int:
        return self.gram.shape[0]


def build_gram(grid: GridSpec, cfg: KernelConfig) -> GPPrior:
    """Gram matrix on the flattened grid plus its Cholesky factor.

    Jitter is added only when the plain factorization fails, escalating
    through 1e-10, 1e-8, 1e-6 times the mean diagonal.
    """
    x = grid.coordinates()
    K = kernel_matrix(cfg, x, x)
    K = 0.5 * (K + K.T)
    scale = float(np.mean(np.diag(K)))
    for jitter in (0.0,) + JITTER_SCHEDULE:
        try:
            L = np.linalg.cholesky(K + jitter * scale * np.eye(len(K)) if jitter else K)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0):
            return GPPrior(cfg, grid, K, L, jitter * scale)
    lam = float(np.linalg.eigvalsh(K)[0])
    raise CholeskyError(f"Cholesky failed after jitter {JITTER_SCHEDULE[-1]:g}; smallest eigenvalue {lam:.3e}")


def cholesky_sample(prior: GPPrior, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` functions per channel as L z; returns (count, C, *points)."""
    c = prior.grid.channels
    z = rng.standard_normal((count, c, prior.n))
    draws = z @ prior.chol.T
    return draws.reshape((count, c) + prior.grid.points)


def whiten(prior: GPPrior, u) -> np.ndarray:
    """Solve L w = u along the last (flattened) axis."""
    flat = np.asarray(u, dtype=float).reshape(-1, prior.n)
    return linalg.solve_triangular(prior.chol, flat.T, lower=True).T


def gaussian_logpdf(u, prior: GPPrior) -> np.ndarray | float:
    """log N(u; 0, K) per function.

    ``u`` may be a single function of n values, or a batch shaped
    (B, C, *points) / (B, n); channels are independent and share K.
    """
    u = np.asarray(u, dtype=float)
    n = prior.n
    if u.size == n:
        w = whiten(prior, u)
        return float(-0.5 * np.sum(w * w) - np.sum(np.log(np.diag(prior.chol))) - 0.5 * n * LOG_2PI)
    if u.size % n or (u.ndim >= 2 and int(np.prod(u.shape[2:] if u.ndim > 2 else u.shape[1:])) != n):
        raise ValueError(f"values of shape {u.shape} do not match a grid of {n} points")
    bsz = u.shape[0]
    w = whiten(prior, u).reshape(bsz, -1)
    chans = w.shape[1] // n
    logdet = np.sum(np.log(np.diag(prior.chol)))
    return -0.5 * np.sum(w * w, axis=1) - chans * (logdet + 0.5 * n * LOG_2PI)


def precision_matvec(prior: GPPrior, a: np.ndarray) -> np.ndarray:
    """K^{-1} a along the last (flattened) axis, by two triangular solves."""
    shape = np.shape(a)
    flat = np.asarray(a, dtype=float).reshape(-1, prior.n).T
    out = linalg.cho_solve((prior.chol, True), flat)
    return out.T.reshape(shape)


def gp_posterior(prior: GPPrior, indices, values, noise_std: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form GP regression on the prior's grid (single channel).

    Returns the posterior mean (n,) and covariance (n, n) given noisy
    observations of the flattened grid values at ``indices``.
    """
    idx = np.asarray(indices, dtype=int)
    y = np.asarray(values, dtype=float)
    K = prior.gram
    if len(idx) == 0:
        return np.zeros(prior.n), K.copy()
    Koo = K[np.ix_(idx, idx)] + noise_std ** 2 * np.eye(len(idx))
    Kxo = K[:, idx]
    cf = linalg.cho_factor(Koo, lower=True)
    mean = Kxo @ linalg.cho_solve(cf, y)
    cov = K - Kxo @ linalg.cho_solve(cf, Kxo.T)
    return mean, 0.5 * (cov + cov.T)


def sample_mvn(mean: np.ndarray, cov: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from N(mean, cov) via an eigen-factorization (cov may be singular)."""
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    root = V * np.sqrt(np.clip(w, 0.0, None))
    return mean + rng.standard_normal((count, len(mean))) @ root.T
