"""Synthetic function datasets and observation subsampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .batch import FunctionBatch
from .gp import GPPrior, GridSpec, KernelConfig, build_gram, cholesky_sample
from .regression import ObservationSet
from .rng import make_rng

TGP_BUDGET = 10 ** 6


class RejectionBudgetExceeded(RuntimeError):
    pass


@dataclass
class Dataset:
    batch: FunctionBatch
    kernel: KernelConfig
    bounds: tuple[float, float] | None = None
    seed: int | None = None
    acceptance_rate: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.batch) < 1:
            raise ValueError("a dataset needs at least one function")

    @property
    def values(self) -> np.ndarray:
        return self.batch.values

    @property
    def grid(self) -> GridSpec:
        return self.batch.grid

    def __len__(self) -> int:
        return len(self.batch)

    def config(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "grid": self.grid.to_dict(),
            "bounds": None if self.bounds is None else list(self.bounds),
            "seed": self.seed,
            "count": len(self),
            "acceptance_rate": self.acceptance_rate,
            **self.meta,
        }


def _prior(kernel_cfg: KernelConfig, grid: GridSpec, prior: GPPrior | None) -> GPPrior:
    if prior is not None:
        if prior.grid != grid or prior.kernel != kernel_cfg:
            raise ValueError("supplied prior does not match kernel/grid")
        return prior
    return build_gram(grid, kernel_cfg)


def gen_gp_functions(kernel_cfg: KernelConfig, grid: GridSpec, count: int, rng=None,
                     prior: GPPrior | None = None) -> Dataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = make_rng(rng)
    p = _prior(kernel_cfg, grid, prior)
    return Dataset(FunctionBatch(cholesky_sample(p, count, rng), grid), kernel_cfg, None, seed)


def gen_tgp_functions(kernel_cfg: KernelConfig, grid: GridSpec, bounds, count: int, rng=None,
                      budget: int = TGP_BUDGET, chunk: int = 4096, prior: GPPrior | None = None) -> Dataset:
    """GP draws kept only if they stay strictly inside ``bounds`` everywhere.

    Rejection is per whole function.  Raises when more than ``budget``
    draws would be needed, which signals bounds too tight for the kernel.
    """
    lo, hi = (float(b) for b in bounds)
    if not lo < hi:
        raise ValueError(f"bounds must satisfy lower < upper, got {bounds}")
    if count < 1:
        raise ValueError("count must be >= 1")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = make_rng(rng)
    p = _prior(kernel_cfg, grid, prior)
    kept, n_kept, drawn, accepted = [], 0, 0, 0
    while n_kept < count:
        if drawn >= budget:
            raise RejectionBudgetExceeded(
                f"kept {n_kept}/{count} functions after {drawn} draws "
                f"(acceptance {accepted / drawn:.2e}); bounds too tight for the kernel")
        n = min(chunk, budget - drawn)
        draws = cholesky_sample(p, n, rng)
        drawn += n
        flat = draws.reshape(n, -1)
        ok = np.all((flat > lo) & (flat < hi), axis=1)
        accepted += int(ok.sum())
        take = draws[ok][: count - n_kept]
        kept.append(take)
        n_kept += len(take)
    vals = np.concatenate(kept)
    assert np.all(vals > lo) and np.all(vals < hi)
    return Dataset(FunctionBatch(vals, grid), kernel_cfg, (lo, hi), seed, accepted / drawn)


def subsample_observations(function, n_obs: int, noise_std: float, rng=None) -> ObservationSet:
    """Noisy values at ``n_obs`` grid points drawn without replacement."""
    u = np.asarray(function.values if isinstance(function, FunctionBatch) else function, dtype=float).reshape(-1)
    if n_obs > len(u):
        raise ValueError(f"n_obs={n_obs} exceeds the {len(u)} available grid values")
    if n_obs < 0 or noise_std < 0:
        raise ValueError("n_obs and noise_std must be non-negative")
    rng = make_rng(rng)
    idx = np.sort(rng.choice(len(u), size=n_obs, replace=False))
    vals = u[idx] + (noise_std * rng.standard_normal(n_obs) if noise_std > 0 else 0.0)
    return ObservationSet(idx, vals, noise_std, size=len(u))
