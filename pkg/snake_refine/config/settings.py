"""
Run configuration.

Values are layered: built-in defaults, then a `key = value` config file, then
SNAKE_REFINE_<KEY> environment variables (a `.env` in the working directory is
loaded by the CLI), then command-line flags.
"""

import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import dotenv_values

from snake_refine.backprop import JACOBIAN_GAUSSIAN, JACOBIAN_INTERPOLANT, LOSS_MSE, LOSSES, TrainingMode
from snake_refine.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "SNAKE_REFINE_"


@dataclass(frozen=True)
class RunConfig:
    # training
    mode: str = "fast"
    lr: float = 0.1
    train_steps: int = 100
    seed: int = 0
    dump_every: int = 0
    loss: str = LOSS_MSE

    # snake
    alpha: float = 1e-2
    beta: float = 1e-3
    gamma: float = 10.0
    steps_snake: int = 10
    sigma: float = 1.0
    truncation: float = 20.0
    full_weight: float = 5.0
    fast_weight: float = 8.0
    max_step: float = 20.0
    damping: float = 2.0
    jacobian: str = JACOBIAN_INTERPOLANT
    driver: str = "fast"

    # metrics
    match_distance: float = 3.0
    snap_radius: float = 4.0
    n_pairs: int = 200
    tolerance: float = 0.15
    threshold: float = 2.0
    prune_length: float = 3.0

    # fixtures
    fixture: str = "fig4"
    grid_size: int = 96
    offset: float = 4.0
    gap: int = 16
    n_branches: int = 3
    amplitude: float = 2.0
    correlation_length: float = 24.0

    # paths
    volume: Optional[str] = None
    graph: Optional[str] = None
    truth: Optional[str] = None
    truth_volume: Optional[str] = None
    output: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "mode", TrainingMode.parse(self.mode).value)
        checks = [
            (self.lr > 0, "lr must be > 0"),
            (self.train_steps >= 1, "train_steps must be >= 1"),
            (self.dump_every >= 0, "dump_every must be >= 0"),
            (self.alpha >= 0 and self.beta >= 0, "alpha and beta must be >= 0"),
            (self.gamma > 0, "gamma must be > 0"),
            (self.steps_snake >= 1, "steps_snake must be >= 1"),
            (self.sigma >= 0, "sigma must be >= 0"),
            (self.truncation > 0, "truncation must be > 0"),
            (self.max_step > 0, "max_step must be > 0"),
            (self.damping >= 0, "damping must be >= 0"),
            (self.loss in LOSSES, f"loss must be one of {', '.join(LOSSES)}"),
            (self.jacobian in (JACOBIAN_INTERPOLANT, JACOBIAN_GAUSSIAN),
             f"jacobian must be '{JACOBIAN_INTERPOLANT}' or '{JACOBIAN_GAUSSIAN}'"),
            (self.driver in ("full", "fast"), "driver must be 'full' or 'fast'"),
            (self.match_distance >= 0, "match_distance must be >= 0"),
            (self.snap_radius >= 0, "snap_radius must be >= 0"),
            (self.n_pairs >= 1, "n_pairs must be >= 1"),
            (0 < self.tolerance < 1, "tolerance must lie in (0, 1)"),
            (self.threshold > 0, "threshold must be > 0"),
            (self.prune_length >= 0, "prune_length must be >= 0"),
            (self.grid_size >= 8, "grid_size must be >= 8"),
            (self.offset >= 0 and self.gap >= 0, "offset and gap must be >= 0"),
            (self.n_branches >= 1, "n_branches must be >= 1"),
            (self.amplitude >= 0, "amplitude must be >= 0"),
            (self.correlation_length > 0, "correlation_length must be > 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(f"Invalid configuration: {message}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}
DEFAULTS: Dict[str, Any] = {name: f.default for name, f in _FIELDS.items()}


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if value is None:
        return None
    if default is None or isinstance(default, str):
        return str(value).strip()
    try:
        if isinstance(default, int):
            # "10" and "10.0" are both accepted for integer keys
            number = float(value)
            if not number.is_integer():
                raise ValueError(f"not an integer: {value}")
            return int(number)
        return float(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value for '{key}': {value!r} ({e})") from e


def _normalize(values: Mapping[str, Any], source: str) -> Dict[str, Any]:
    normalized = {}
    for raw_key, value in values.items():
        key = raw_key.strip().lower().replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"Unknown configuration key '{raw_key}' in {source}")
        normalized[key] = _coerce(key, value)
    return normalized


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    return _normalize(dotenv_values(dotenv_path=path), str(path))


def read_environment(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    environ = os.environ if environ is None else environ
    scoped = {k[len(ENV_PREFIX):]: v for k, v in environ.items() if k.startswith(ENV_PREFIX)}
    return _normalize(scoped, "environment")


def load_run_config(config_file: Optional[Union[str, Path]] = None,
                    overrides: Optional[Mapping[str, Any]] = None,
                    environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Build a RunConfig from defaults < file < environment < overrides.

    Overrides whose value is None are ignored, so argparse namespaces with unset
    flags can be passed straight through.

    Raises:
        ConfigError on unknown keys, uncoercible values or invalid ranges
    """
    merged: Dict[str, Any] = {}
    if config_file is not None:
        merged.update(read_config_file(config_file))
    merged.update(read_environment(environ))
    if overrides:
        merged.update(_normalize({k: v for k, v in overrides.items() if v is not None},
                                 "command line"))
    logger.debug(f"Configuration overrides: {merged}")
    return replace(RunConfig(), **merged)
