"""Run configuration: TOML (or JSON) sections mapped onto typed dataclasses.

Every problem found while validating is collected and reported together.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .flow import CFMConfig, DivergenceConfig
from .fno import FNOConfig
from .gp import GridSpec, KernelConfig
from .regression import SGLDConfig
from .solvers import SolverConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "gp"
    count: int = 2000
    heldout: int = 1000
    points: tuple[int, ...] = (64,)
    domain: tuple[tuple[float, float], ...] = ((0.0, 1.0),)
    channels: int = 1
    bounds: tuple[float, float] | None = None  # truncation bounds for kind = "tgp"
    kernel: KernelConfig = KernelConfig("matern", length_scale=0.3, smoothness=1.5)

    def __post_init__(self):
        if self.kind not in ("gp", "tgp"):
            raise ValueError(f"dataset.kind must be gp or tgp, got {self.kind!r}")
        if self.count < 1 or self.heldout < 0:
            raise ValueError("dataset.count must be >= 1 and dataset.heldout >= 0")
        if self.kind == "tgp" and self.bounds is None:
            raise ValueError("dataset.bounds is required for kind = 'tgp'")

    def grid(self, points=None) -> GridSpec:
        return GridSpec(tuple(points or self.points), self.domain, self.channels)


@dataclass(frozen=True)
class RegressionConfig:
    n_obs: int = 6
    noise_std: float = 1e-2
    truth_draws: int = 1000
    resolution: int | None = None  # query grid; default: training grid
    test_index: int = 0  # held-out function used as ground truth


@dataclass(frozen=True)
class MetricsConfig:
    n_samples: int = 1000
    bins: int = 64


@dataclass(frozen=True)
class IOConfig:
    out_dir: str = "runs/default"
    dataset: str | None = None
    checkpoint: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int
    dataset: DatasetConfig = DatasetConfig()
    reference: KernelConfig = KernelConfig("matern", length_scale=0.01, smoothness=0.5)
    fno: FNOConfig = FNOConfig()
    cfm: CFMConfig = CFMConfig()
    solver: SolverConfig = SolverConfig()
    divergence: DivergenceConfig = DivergenceConfig()
    sgld: SGLDConfig = SGLDConfig()
    regression: RegressionConfig = RegressionConfig()
    metrics: MetricsConfig = MetricsConfig()
    io: IOConfig = IOConfig()

    @property
    def dataset_path(self) -> Path:
        return Path(self.io.dataset) if self.io.dataset else Path(self.io.out_dir) / "dataset.ofm"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.io.checkpoint) if self.io.checkpoint else Path(self.io.out_dir) / "model.ofm"

    def to_dict(self) -> dict:
        return _strip_none(asdict(self))


SECTIONS = {
    "dataset": DatasetConfig,
    "reference": KernelConfig,
    "fno": FNOConfig,
    "cfm": CFMConfig,
    "solver": SolverConfig,
    "divergence": DivergenceConfig,
    "sgld": SGLDConfig,
    "regression": RegressionConfig,
    "metrics": MetricsConfig,
    "io": IOConfig,
}


def _strip_none(x):
    if isinstance(x, dict):
        return {k: _strip_none(v) for k, v in x.items() if v is not None}
    if isinstance(x, (list, tuple)):
        return [_strip_none(v) for v in x]
    return x


def _coerce(value, default, where: str, problems: list[str]):
    """Convert a parsed value to the type suggested by the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{where}: expected a number, got {value!r}")
            return value
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            problems.append(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple) or isinstance(value, list):
        if not isinstance(value, (list, tuple)):
            problems.append(f"{where}: expected a list, got {value!r}")
            return value
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _build(cls, raw, where: str, problems: list[str]):
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected a table, got {type(raw).__name__}")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            problems.append(f"{where}.{key}: unknown key")
            continue
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            merged = {**asdict(default), **value} if isinstance(value, dict) else value
            kwargs[key] = _build(type(default), merged, f"{where}.{key}", problems)
        else:
            kwargs[key] = _coerce(value, default, f"{where}.{key}", problems)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def config_from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    problems: list[str] = []
    raw = dict(raw)
    seed = raw.pop("seed", None)
    if seed is None:
        problems.append("seed: missing mandatory key")
    elif isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        problems.append(f"seed: expected a non-negative integer, got {seed!r}")
    built = {}
    for key, value in raw.items():
        if key not in SECTIONS:
            problems.append(f"{key}: unknown section")
            continue
        built[key] = _build(SECTIONS[key], value, key, problems)
    if problems or any(v is None for v in built.values()):
        raise ConfigError(problems)
    cfg = RunConfig(seed=seed, **built)
    problems.extend(_cross_checks(cfg))
    if problems:
        raise ConfigError(problems)
    if base_dir is not None:
        cfg = _resolve_paths(cfg, base_dir)
    return cfg


def _cross_checks(cfg: RunConfig) -> list[str]:
    out = []
    pts = cfg.dataset.points
    if cfg.fno.dims != len(pts):
        out.append(f"fno.dims = {cfg.fno.dims} but dataset grid has {len(pts)} axes")
    else:
        for i, (n, k) in enumerate(zip(pts, cfg.fno.modes)):
            limit = n // 2 + 1 if i == len(pts) - 1 else n // 2
            if k > limit:
                out.append(f"fno.modes = {k} exceeds {limit} representable modes for grid size {n} (axis {i})")
    if cfg.fno.in_channels != cfg.dataset.channels or cfg.fno.out_channels != cfg.dataset.channels:
        out.append(f"fno channels ({cfg.fno.in_channels}, {cfg.fno.out_channels}) do not match "
                   f"dataset.channels = {cfg.dataset.channels}")
    if cfg.cfm.batch_size > cfg.dataset.count:
        out.append(f"cfm.batch_size = {cfg.cfm.batch_size} exceeds dataset.count = {cfg.dataset.count}")
    m = int(np.prod(pts)) if cfg.regression.resolution is None else cfg.regression.resolution ** len(pts)
    if cfg.regression.n_obs > m:
        out.append(f"regression.n_obs = {cfg.regression.n_obs} exceeds {m} query points")
    if cfg.regression.noise_std <= 0:
        out.append("regression.noise_std must be > 0")
    return out


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def res(p):
        if p is None:
            return None
        q = Path(p).expanduser()
        return str(q if q.is_absolute() else (base / q).resolve())
    io = IOConfig(res(cfg.io.out_dir), res(cfg.io.dataset), res(cfg.io.checkpoint))
    return dataclasses.replace(cfg, io=io)


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file {path} does not exist"])
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
    else:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
    return config_from_dict(raw, path.parent.resolve())


def serialize_config(cfg: RunConfig, fmt: str = "toml") -> str:
    d = cfg.to_dict()
    if fmt == "json":
        return json.dumps(d, indent=2)
    return tomli_w.dumps(d)
