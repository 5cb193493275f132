"""Experiment configuration: a flat ``key=value`` file overlaid by CLI flags."""

from __future__ import annotations

import inspect
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import MODELS

FILTERS = ("lgbf", "egbf", "pf")

# default points per dimension when the config does not give a grid
DEFAULT_POINTS = {"henon": 31, "ct5d": 11, "linear1d": 101, "linear2d": 31}

_KEYS = ("model", "filter", "grid", "particles", "kappa", "mc_runs", "steps",
         "seed", "out", "debug_dump", "workers")


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "henon"
    filters: tuple = ("lgbf",)
    grid: Optional[tuple] = None
    particles: Optional[int] = None
    kappa: float = 5.0
    mc_runs: int = 100
    steps: int = 10
    seed: int = 1
    out: Optional[Path] = None
    debug_dump: bool = False
    workers: int = 1
    model_params: dict = field(default_factory=dict)

    @property
    def counts(self) -> tuple:
        """Grid point counts, broadcast to the model dimension."""
        from .model import model_dim
        dim = model_dim(self.model)
        grid = self.grid or (DEFAULT_POINTS.get(self.model, 31),)
        return tuple(grid) * dim if len(grid) == 1 else tuple(grid)

    @property
    def n_particles(self) -> int:
        if self.particles is not None:
            return self.particles
        n = 1
        for c in self.counts:
            n *= c
        return n


def _parse_bool(key, value):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {value!r}")


def _parse_int(key, value):
    try:
        return int(str(value).strip())
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {value!r}") from None


def _parse_float(key, value):
    try:
        return float(str(value).strip())
    except ValueError:
        raise ConfigError(key, f"expected a number, got {value!r}") from None


def _parse_grid(key, value):
    parts = [p for p in str(value).replace(" ", "").split(",") if p]
    if not parts:
        raise ConfigError(key, "empty grid specification")
    counts = []
    for i, p in enumerate(parts, start=1):
        c = _parse_int(key, p)
        if c < 3 or c % 2 == 0:
            raise ConfigError(key, f"dimension {i} has count {c}; counts must be odd and >= 3")
        counts.append(c)
    return tuple(counts)


def _parse_model_param(key, value):
    parts = [p for p in str(value).split(",") if p.strip()]
    nums = tuple(_parse_float(key, p) for p in parts)
    if not nums:
        raise ConfigError(key, "empty value")
    return nums[0] if len(nums) == 1 else nums


def _apply(values: dict, key: str, raw) -> None:
    if key.startswith("model."):
        values.setdefault("model_params", {})[key[len("model."):]] = _parse_model_param(key, raw)
    elif key == "model":
        values["model"] = str(raw).strip()
    elif key == "filter":
        values["filters"] = tuple(f.strip().lower() for f in str(raw).split(",") if f.strip())
    elif key == "grid":
        values["grid"] = _parse_grid(key, raw)
    elif key in ("particles", "mc_runs", "steps", "seed", "workers"):
        values[key] = _parse_int(key, raw)
    elif key == "kappa":
        values["kappa"] = _parse_float(key, raw)
    elif key == "out":
        values["out"] = Path(str(raw).strip())
    elif key == "debug_dump":
        values["debug_dump"] = _parse_bool(key, raw)
    else:
        raise ConfigError(key, "unknown configuration key")


def read_config_file(path) -> dict:
    """Parse a flat key=value file into raw string values."""
    raw = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS and not key.startswith("model."):
            raise ConfigError(key, "unknown configuration key")
        raw[key] = value
    return raw


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.model not in MODELS:
        raise ConfigError("model", f"unknown model {cfg.model!r}; choose from {', '.join(sorted(MODELS))}")
    if not cfg.filters:
        raise ConfigError("filter", "no filter selected")
    for f in cfg.filters:
        if f not in FILTERS:
            raise ConfigError("filter", f"unknown filter {f!r}; choose from {', '.join(FILTERS)}")
    params = inspect.signature(MODELS[cfg.model]).parameters
    for name in cfg.model_params:
        if name not in params:
            raise ConfigError(f"model.{name}", f"not a parameter of model {cfg.model!r}")
    from .model import model_dim
    dim = model_dim(cfg.model)
    if cfg.grid is not None and len(cfg.grid) not in (1, dim):
        raise ConfigError("grid", f"model {cfg.model!r} needs {dim} counts (or one for all), got {len(cfg.grid)}")
    if not 1.0 <= cfg.kappa <= 10.0:
        raise ConfigError("kappa", f"must lie in [1, 10], got {cfg.kappa}")
    if cfg.mc_runs < 1:
        raise ConfigError("mc_runs", "must be >= 1")
    if cfg.steps < 0:
        raise ConfigError("steps", "must be >= 0")
    if cfg.particles is not None and cfg.particles < 1:
        raise ConfigError("particles", "must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("workers", "must be >= 1")
    return cfg


def build_config(file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Defaults, then file values, then overrides (all raw strings)."""
    values: dict = {}
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            if raw is not None:
                _apply(values, key, raw)
    if "out" not in values and os.environ.get("GRIDFLOW_OUT"):
        values["out"] = Path(os.environ["GRIDFLOW_OUT"])
    return validate(replace(ExperimentConfig(), **values))


def config_to_text(cfg: ExperimentConfig) -> str:
    """Echo a config in the file format; parsing it back gives the same config."""
    lines = [
        f"model={cfg.model}",
        f"filter={','.join(cfg.filters)}",
    ]
    if cfg.grid is not None:
        lines.append(f"grid={','.join(str(c) for c in cfg.grid)}")
    if cfg.particles is not None:
        lines.append(f"particles={cfg.particles}")
    lines += [
        f"kappa={cfg.kappa!r}",
        f"mc_runs={cfg.mc_runs}",
        f"steps={cfg.steps}",
        f"seed={cfg.seed}",
        f"debug_dump={'true' if cfg.debug_dump else 'false'}",
        f"workers={cfg.workers}",
    ]
    if cfg.out is not None:
        lines.append(f"out={cfg.out}")
    for name, value in sorted(cfg.model_params.items()):
        text = ",".join(repr(float(v)) for v in value) if isinstance(value, tuple) else repr(float(value))
        lines.append(f"model.{name}={text}")
    return "\n".join(lines) + "\n"
