"""Run configuration shared by the online loop and the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .smc import SmcConfig

__all__ = ["RunConfig", "ConfigError", "load_config"]


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


@dataclass(frozen=True)
class RunConfig:
    env: str = "deep_sea:5"
    n_particles: int = 20
    prior_sigma: float = 4.0
    alpha: float = 0.9
    eps_target: float = 0.05
    gr_threshold: float = 2.2
    gr_majority: float = 0.5
    n_m: int = 3
    n_b: int = 5
    hmc_max_steps: int = 30
    delta_star0: float = 0.5
    l_star0: int = 10
    episodes: int = 300
    seed: int = 0
    mode: str = "adaptive"

    def __post_init__(self):
        checks = [
            (self.n_particles >= 2, "n_particles must be >= 2"),
            (self.prior_sigma > 0, "prior_sigma must be positive"),
            (0 < self.alpha < 1, "alpha must lie in (0, 1)"),
            (self.eps_target > 0, "eps_target must be positive"),
            (self.gr_threshold > 0, "gr_threshold must be positive"),
            (0 <= self.gr_majority <= 1, "gr_majority must lie in [0, 1]"),
            (self.n_m >= 1 and self.n_b >= 1, "n_m and n_b must be >= 1"),
            (self.hmc_max_steps >= 1, "hmc_max_steps must be >= 1"),
            (self.delta_star0 > 0, "delta_star0 must be positive"),
            (self.l_star0 >= 1, "l_star0 must be >= 1"),
            (self.episodes >= 1, "episodes must be >= 1"),
            (0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer"),
            (self.mode in ("adaptive", "non_adaptive"), "mode must be adaptive or non_adaptive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def smc_config(self) -> SmcConfig:
        return SmcConfig(
            alpha=self.alpha,
            gr_threshold=self.gr_threshold,
            gr_majority=self.gr_majority,
            n_m=self.n_m,
            n_b=self.n_b,
            max_hmc_steps=self.hmc_max_steps,
            delta_star0=self.delta_star0,
            l_star0=self.l_star0,
            adaptive=self.mode == "adaptive",
        )

    def replace(self, **kw) -> "RunConfig":
        return RunConfig(**{**asdict(self), **{k: v for k, v in kw.items() if v is not None}})

    def to_dict(self) -> dict:
        return asdict(self)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name, value):
    kind = _TYPES[name]
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{name} must be an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string")
    return value


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Read a flat JSON object of RunConfig fields; ``overrides`` win."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(data) - set(_TYPES)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**{k: _coerce(k, v) for k, v in data.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
