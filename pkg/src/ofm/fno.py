"""Time-conditioned Fourier neural operator used as the learned vector field.

Layout is channels-first: a batch of functions has shape ``(B, C, *S)``.
The operator sees the function values, a constant time channel and the
normalized grid coordinates, lifts them pointwise to ``width`` channels,
applies ``n_layers`` blocks of ``gelu(spectral_conv(v) + W v + b + E(t))``
(no activation after the last block) and projects back to ``C`` channels.
``E(t)`` is a per-layer linear map of fixed sinusoidal features of ``t``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diff as D


@dataclass(frozen=True)
class FNOConfig:
    dims: int = 1
    modes: tuple[int, ...] = (32,)
    width: int = 64
    n_layers: int = 4
    in_channels: int = 1
    out_channels: int = 1
    time_embed: int = 8
    proj_width: int = 128
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(m) for m in np.atleast_1d(self.modes)))
        if self.dims not in (1, 2):
            raise ValueError(f"dims must be 1 or 2, got {self.dims}")
        if len(self.modes) != self.dims:
            raise ValueError(f"need {self.dims} mode counts, got {self.modes}")
        if min(self.modes) < 1 or self.width < 1 or self.n_layers < 1 or self.proj_width < 1:
            raise ValueError("modes, width, n_layers and proj_width must be >= 1")
        if self.time_embed < 0 or self.time_embed % 2:
            raise ValueError("time_embed must be a non-negative even number")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @classmethod
    def default_1d(cls, **kw) -> "FNOConfig":
        return cls(**{"dims": 1, "modes": (32,), "width": 64, "n_layers": 4, **kw})

    @classmethod
    def default_2d(cls, **kw) -> "FNOConfig":
        return cls(**{"dims": 2, "modes": (12, 12), "width": 32, "n_layers": 4, **kw})

    def retained_shape(self) -> tuple[int, ...]:
        return tuple(2 * m for m in self.modes[:-1]) + (self.modes[-1],)

    def check_grid(self, grid_shape: Sequence[int]) -> None:
        """Raise if ``grid_shape`` cannot represent the retained modes."""
        grid_shape = tuple(grid_shape)
        if len(grid_shape) != self.dims:
            raise D.ShapeError(f"operator is {self.dims}-D, grid is {grid_shape}")
        for i, (n, k) in enumerate(zip(grid_shape, self.modes)):
            limit = n // 2 + 1 if i == self.dims - 1 else n // 2
            if k > limit:
                raise D.ShapeError(f"modes={k} exceed {limit} representable coefficients for grid size {n}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = list(self.modes)
        return d


def param_shapes(cfg: FNOConfig) -> dict[str, tuple[int, ...]]:
    w, c = cfg.width, cfg.in_channels
    shapes = {
        "lift.w": (w, c + 1 + cfg.dims),
        "lift.b": (w,),
    }
    for layer in range(cfg.n_layers):
        shapes[f"layer{layer}.spec"] = (w, w) + cfg.retained_shape() + (2,)
        shapes[f"layer{layer}.w"] = (w, w)
        shapes[f"layer{layer}.b"] = (w,)
        if cfg.time_embed:
            shapes[f"layer{layer}.temb"] = (w, cfg.time_embed)
    shapes["proj1.w"] = (cfg.proj_width, w)
    shapes["proj1.b"] = (cfg.proj_width,)
    shapes["proj2.w"] = (cfg.out_channels, cfg.proj_width)
    shapes["proj2.b"] = (cfg.out_channels,)
    return shapes


@dataclass
class OperatorParams:
    config: FNOConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.tensors):
            missing = sorted(set(shapes) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(shapes))
            raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for k, shp in shapes.items():
            if self.tensors[k].shape != shp:
                raise D.ShapeError(f"{k}: shape {self.tensors[k].shape}, expected {shp}")

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def copy(self) -> "OperatorParams":
        return OperatorParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "OperatorParams":
        return OperatorParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})


def init_params(cfg: FNOConfig, rng: np.random.Generator, zero: bool = False) -> OperatorParams:
    """Spectral weights uniform in [0, 1/width^2) (real and imaginary parts);
    pointwise weights Kaiming-uniform with bound 1/sqrt(fan_in)."""
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if zero:
            tensors[name] = np.zeros(shape)
        elif name.endswith(".spec"):
            tensors[name] = rng.uniform(0.0, 1.0, size=shape) / cfg.width ** 2
        elif name.endswith(".b"):
            fan_in = param_shapes(cfg)[name[:-2] + ".w"][1]
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return OperatorParams(cfg, tensors)


def grid_coordinates(grid_shape: Sequence[int]) -> np.ndarray:
    """Normalized periodic coordinates j/n per axis, shape (d, *grid_shape)."""
    axes = [np.arange(n) / n for n in grid_shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=0)


def time_features(t: np.ndarray, width: int) -> np.ndarray:
    """Sinusoidal features of t in [0, 1], shape (B, width)."""
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    freqs = np.pi * np.arange(1, width // 2 + 1)
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)], axis=1)


def spectral_conv(u, layer_weights, modes: Sequence[int]) -> D.Tensor:
    return D.spectral_conv(u, layer_weights, modes)


def operator_forward(params, t, u, cfg: FNOConfig | None = None) -> D.Tensor:
    """Evaluate G(t, u) for a batch u of shape (B, C, *S).

    ``params`` is an :class:`OperatorParams` or a mapping of (possibly
    tracked) tensors; ``t`` is a scalar or a length-B vector.  The result is
    a Tensor on the same tape as the tracked inputs, if any.
    """
    if isinstance(params, OperatorParams):
        cfg = params.config
        p = params.tensors
    else:
        p = params
        if cfg is None:
            raise ValueError("cfg is required when params is a plain mapping")
    u = D.as_tensor(u)
    if u.ndim != cfg.dims + 2:
        raise D.ShapeError(f"expected (B, C, *S) with {cfg.dims} spatial axes, got {u.shape}")
    bsz, chans = u.shape[:2]
    spatial = u.shape[2:]
    if chans != cfg.in_channels:
        raise D.ShapeError(f"input has {chans} channels, operator expects {cfg.in_channels}")
    cfg.check_grid(spatial)
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (bsz,))
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")

    dtype = u.data.dtype
    tchan = np.broadcast_to(t.reshape((bsz, 1) + (1,) * len(spatial)), (bsz, 1) + spatial)
    coords = np.broadcast_to(grid_coordinates(spatial)[None], (bsz, cfg.dims) + spatial)
    extra = np.concatenate([tchan, coords], axis=1).astype(dtype)
    x = D.concat([u, extra], axis=1)
    v = D.linear(x, p["lift.w"], p["lift.b"])
    feats = time_features(t, cfg.time_embed).astype(dtype) if cfg.time_embed else None
    bshape = (bsz, cfg.width) + (1,) * len(spatial)
    for layer in range(cfg.n_layers):
        y = D.spectral_conv(v, p[f"layer{layer}.spec"], cfg.modes)
        y = y + D.linear(v, p[f"layer{layer}.w"], p[f"layer{layer}.b"])
        if feats is not None:
            y = y + D.reshape(D.einsum("be,we->bw", feats, p[f"layer{layer}.temb"]), bshape)
        v = D.gelu(y) if layer < cfg.n_layers - 1 else y
    h = D.gelu(D.linear(v, p["proj1.w"], p["proj1.b"]))
    return D.linear(h, p["proj2.w"], p["proj2.b"])
