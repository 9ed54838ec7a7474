"""Regression metrics (SMSE, MSLL) and sample-distribution diagnostics.

MSLL follows the per-point Gaussian log loss literally, without subtracting
a trivial-model baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

HIST_BINS = 64
MIN_SAMPLES = 50


def _truth(truth_set) -> np.ndarray:
    t = np.asarray(truth_set, dtype=float)
    return t[None] if t.ndim == 1 else t


def smse(pred_mean, truth_set) -> float:
    """Mean squared error against every truth sample, over the pooled truth variance."""
    truth = _truth(truth_set)
    pred = np.asarray(pred_mean, dtype=float)
    if pred.shape != truth.shape[1:]:
        raise ValueError(f"prediction shape {pred.shape} does not match truth samples {truth.shape[1:]}")
    var = float(np.var(truth))
    if var <= 0:
        raise ValueError("truth set has zero variance")
    return float(np.mean((truth - pred) ** 2) / var)


def msll(pred_mean, pred_var, truth_set) -> float:
    """Average of 0.5 log(2 pi s2) + (truth - mean)^2 / (2 s2)."""
    truth = _truth(truth_set)
    mean = np.asarray(pred_mean, dtype=float)
    var = np.broadcast_to(np.asarray(pred_var, dtype=float), mean.shape)
    if mean.shape != truth.shape[1:]:
        raise ValueError(f"prediction shape {mean.shape} does not match truth samples {truth.shape[1:]}")
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise ValueError("predictive variance must be positive")
    return float(np.mean(0.5 * np.log(2 * math.pi * var) + (truth - mean) ** 2 / (2 * var)))


def autocovariance(samples) -> np.ndarray:
    """Mean biased autocovariance along the last axis, lags 0..n//2."""
    x = np.asarray(samples, dtype=float)
    x = x.reshape(-1, x.shape[-1])
    n = x.shape[1]
    x = x - x.mean(axis=1, keepdims=True)
    lags = n // 2 + 1
    out = np.array([np.mean(np.sum(x[:, : n - k] * x[:, k:], axis=1) / n) for k in range(lags)])
    return out


def power_spectrum(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=float)
    x = x.reshape(-1, x.shape[-1])
    return np.mean(np.abs(np.fft.rfft(x, axis=1)) ** 2, axis=0) / x.shape[1]


def _hist(x, lo, hi, bins):
    h, _ = np.histogram(np.ravel(x), bins=bins, range=(lo, hi), density=True)
    return h


def distribution_diagnostics(set_a, set_b, bins: int = HIST_BINS, min_samples: int = MIN_SAMPLES) -> dict:
    """Density, autocovariance and log power-spectrum MSE between two sample sets."""
    a = np.asarray(set_a.values if hasattr(set_a, "values") else set_a, dtype=float)
    b = np.asarray(set_b.values if hasattr(set_b, "values") else set_b, dtype=float)
    if len(a) < min_samples or len(b) < min_samples:
        raise ValueError(f"need at least {min_samples} samples per set, got {len(a)} and {len(b)}")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"sample sets live on different grids: {a.shape[1:]} vs {b.shape[1:]}")
    lo = float(min(a.min(), b.min()))
    hi = float(max(a.max(), b.max()))
    if hi == lo:
        hi = lo + 1.0
    density = float(np.mean((_hist(a, lo, hi, bins) - _hist(b, lo, hi, bins)) ** 2))
    autocov = float(np.mean((autocovariance(a) - autocovariance(b)) ** 2))
    pa, pb = power_spectrum(a), power_spectrum(b)
    floor = 1e-12 * max(pa.max(), pb.max(), 1e-300)
    spectra = float(np.mean((np.log(pa + floor) - np.log(pb + floor)) ** 2))
    return {"density_mse": density, "autocov_mse": autocov, "spectra_mse": spectra}


@dataclass
class MetricsReport:
    smse: float | None = None
    msll: float | None = None
    density_mse: float | None = None
    autocov_mse: float | None = None
    spectra_mse: float | None = None
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("smse", "msll", "density_mse", "autocov_mse", "spectra_mse"):
            v = getattr(self, k)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{k} is not finite")
        if self.smse is not None and self.smse < 0:
            raise ValueError("smse must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if isinstance(v, float)]
        width = max((len(k) for k, _ in rows), default=0)
        return "\n".join(f"{k:<{width}}  {v:.6g}" for k, v in rows)
