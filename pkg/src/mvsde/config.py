"""Experiment configuration: INI files with strict keys, resolved into an immutable ExperimentConfig.

Example::

    [experiment]
    name = chaos

    [kernel]
    name = linear
    a = -1
    c = 0.5
    s = 0.2

    [initial_law]
    name = gaussian
    mean = 1
    cov = 0.04

    [grid]
    T = 1
    h_fine = 2^-10

    [particles]
    N_list = 8, 16, 32, 64, 128, 256, 512
"""

from __future__ import annotations

import configparser
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .errors import ConfigError
from .kernels import build_kernel
from .paths import TimeGrid, law_moments

logger = logging.getLogger(__name__)

EXPERIMENTS = (
    "chaos",
    "euler-rate",
    "picard",
    "moments",
    "increments",
    "centered-stats",
    "validate-kernel",
    "overall",
)
LAW_SOURCES = ("picard", "analytic")
THREADS_ENV = "MVSDE_THREADS"

# section -> {key: ExperimentConfig field}; None marks free-form parameter sections
_SECTIONS: Mapping[str, Optional[Mapping[str, str]]] = {
    "experiment": {"name": "experiment"},
    "kernel": None,
    "initial_law": None,
    "grid": {"T": "T", "h_fine": "h_fine", "h_list": "h_list", "lags": "lags"},
    "particles": {"N": "N", "N_list": "N_list"},
    "picard": {
        "M_law": "M_law",
        "tol": "tol",
        "max_iter": "max_iter",
        "law_source": "law_source",
        "cache_dir": "cache_dir",
    },
    "run": {
        "replications": "replications",
        "seed": "seed",
        "threads": "threads",
        "out": "out",
        "memory_budget_mb": "memory_budget_mb",
        "dump_paths": "dump_paths",
    },
    "checks": {
        "alpha": "alpha",
        "envelope_tolerance": "envelope_tolerance",
        "slope_band": "slope_band",
        "ratio_limit": "ratio_limit",
        "validation_samples": "validation_samples",
    },
}

_POWER = re.compile(r"^\s*([-+]?\d+(?:\.\d*)?)\s*\^\s*([-+]?\d+(?:\.\d*)?)\s*$")


@dataclass(frozen=True)
class ComponentSpec:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    kernel: ComponentSpec
    initial_law: ComponentSpec = field(default_factory=lambda: ComponentSpec("point_mass", {"x0": 0.0}))
    T: float = 1.0
    h_fine: float = 2.0 ** -10
    h_list: tuple[float, ...] = ()
    lags: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128)
    N: int = 256
    N_list: tuple[int, ...] = ()
    M_law: int = 4000
    tol: float = 1e-6
    max_iter: int = 30
    law_source: str = "picard"
    cache_dir: Optional[str] = None
    replications: int = 32
    seed: int = 0
    threads: int = 1
    out: str = "results"
    memory_budget_mb: float = 512.0
    dump_paths: bool = False
    alpha: float = 0.4
    envelope_tolerance: float = 0.05
    slope_band: Optional[tuple[float, float]] = None
    ratio_limit: Optional[float] = None
    validation_samples: int = 10000

    @property
    def fine_grid(self) -> TimeGrid:
        return TimeGrid.from_step(self.T, self.h_fine)

    def grid_for(self, h: float) -> TimeGrid:
        return TimeGrid.from_step(self.T, h)

    @property
    def memory_budget(self) -> int:
        return int(self.memory_budget_mb * 2**20)

    @property
    def run_name(self) -> str:
        return f"{self.experiment}-{self.kernel.name}"

    def as_dict(self) -> dict:
        return asdict(self)


def parse_number(text: str) -> Union[int, float]:
    """Parse ``3``, ``1e-6`` or ``2^-10``."""
    text = text.strip()
    m = _POWER.match(text)
    if m:
        return float(m.group(1)) ** float(m.group(2))
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"not a number: {text!r}") from None


def parse_list(text: str) -> list[Union[int, float]]:
    return [parse_number(part) for part in text.split(",") if part.strip()]


def _parse_param(text: str) -> Any:
    """Kernel/law parameter: number, comma list of numbers, or a bare string."""
    try:
        values = parse_list(text)
    except ConfigError:
        return text.strip()
    if not values:
        raise ConfigError("empty parameter value")
    return values[0] if len(values) == 1 and "," not in text else values


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(name: str, raw: str) -> Any:
    if name in ("h_list", "N_list", "lags", "slope_band"):
        values = parse_list(raw)
        if name in ("N_list", "lags"):
            if any(float(v) != int(v) for v in values):
                raise ConfigError(f"{name} must hold integers")
            return tuple(int(v) for v in values)
        return tuple(float(v) for v in values)
    if name in ("N", "M_law", "max_iter", "replications", "seed", "threads", "validation_samples"):
        value = parse_number(raw)
        if float(value) != int(value):
            raise ConfigError(f"{name} must be an integer, got {raw!r}")
        return int(value)
    if name == "dump_paths":
        return _parse_bool(raw)
    if name in ("experiment", "law_source", "out", "cache_dir"):
        return raw.strip()
    return float(parse_number(raw))


def _component(parser: configparser.ConfigParser, section: str) -> Optional[ComponentSpec]:
    if not parser.has_section(section):
        return None
    items = dict(parser.items(section))
    if "name" not in items:
        raise ConfigError(f"[{section}] needs a 'name' key")
    name = items.pop("name").strip()
    return ComponentSpec(name, {k: _parse_param(v) for k, v in items.items()})


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e

    values: dict[str, Any] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}] (known: {', '.join(_SECTIONS)})")
        keys = _SECTIONS[section]
        if keys is None:
            continue
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}] (known: {', '.join(keys)})")
            values[keys[key]] = _coerce(keys[key], raw)

    kernel = _component(parser, "kernel")
    if kernel is None:
        raise ConfigError(f"{source}: missing [kernel] section")
    values["kernel"] = kernel
    law = _component(parser, "initial_law")
    if law is not None:
        values["initial_law"] = law
    if "experiment" not in values:
        raise ConfigError(f"{source}: missing [experiment] name")
    return validate(ExperimentConfig(**values))


def _divides(step: float, span: float) -> bool:
    n = round(span / step)
    return n >= 1 and abs(n * step - span) <= 1e-9 * span


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment '{cfg.experiment}' (known: {', '.join(EXPERIMENTS)})")
    if not cfg.T > 0 or not math.isfinite(cfg.T):
        raise ConfigError(f"T must be positive, got {cfg.T}")
    if not cfg.h_fine > 0 or not _divides(cfg.h_fine, cfg.T):
        raise ConfigError(f"h_fine = {cfg.h_fine} does not divide T = {cfg.T}")
    for h in cfg.h_list:
        if not h > 0 or not _divides(h, cfg.T):
            raise ConfigError(f"h = {h} in h_list does not divide T = {cfg.T}")
        if not _divides(cfg.h_fine, h):
            raise ConfigError(f"h = {h} in h_list is not an integer multiple of h_fine = {cfg.h_fine}")
    if any(b <= a for a, b in zip(cfg.N_list, cfg.N_list[1:])):
        raise ConfigError(f"N_list must be strictly increasing, got {list(cfg.N_list)}")
    if any(n < 1 for n in cfg.N_list) or cfg.N < 1:
        raise ConfigError("particle counts must be positive")
    if cfg.experiment == "increments":
        if not cfg.lags or any(b <= a for a, b in zip(cfg.lags, cfg.lags[1:])) or cfg.lags[0] < 1:
            raise ConfigError(f"lags must be positive and strictly increasing, got {list(cfg.lags)}")
        if cfg.lags[-1] > cfg.fine_grid.n_steps:
            raise ConfigError(f"lag {cfg.lags[-1]} exceeds the {cfg.fine_grid.n_steps} fine steps")
    if cfg.law_source not in LAW_SOURCES:
        raise ConfigError(f"law_source must be one of {LAW_SOURCES}, got '{cfg.law_source}'")
    if cfg.replications < 1 or cfg.M_law < 1 or cfg.max_iter < 1 or cfg.threads < 1:
        raise ConfigError("replications, M_law, max_iter and threads must be >= 1")
    if not cfg.tol > 0:
        raise ConfigError(f"tol must be positive, got {cfg.tol}")
    if not 0.0 < cfg.alpha < 0.5:
        raise ConfigError(f"alpha must lie in (0, 1/2), got {cfg.alpha}")
    if cfg.slope_band is not None and (len(cfg.slope_band) != 2 or cfg.slope_band[0] > cfg.slope_band[1]):
        raise ConfigError("slope_band must be 'low, high'")
    kernel = build_kernel(cfg.kernel.name, cfg.kernel.params)
    law_moments(cfg.initial_law.name, cfg.initial_law.params, kernel.dim)
    return cfg


def resolve_threads(flag: Optional[int], configured: int) -> int:
    """--threads beats MVSDE_THREADS, which beats the config value."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return configured


def load_config(path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = parse_config(text, source=str(path))
    overrides = {k: v for k, v in dict(overrides or {}).items() if v is not None}
    threads = resolve_threads(overrides.pop("threads", None), cfg.threads)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"unknown override(s) {unknown}")
    cfg = validate(replace(cfg, threads=threads, **overrides))
    logger.info("resolved config %s: %s", path, cfg.as_dict())
    return cfg
