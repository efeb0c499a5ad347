"""Run configuration: one JSON file per run, defaults filled in and dumped back out."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import EnsembleConfig
from .envs import ENV_NAMES
from .errors import ConfigError
from .pevi import PenaltyConfig, SacConfig, TrainConfig


@dataclass
class UqConfig:
    episodes: int = 10
    every: int = 10
    n_exact: int = 1000


@dataclass
class FigConfig:
    n_grid: tuple[int, ...] = (10, 100, 1000, 10000)
    reps: int = 100
    n_ref: int = 100_000

    def __post_init__(self) -> None:
        self.n_grid = tuple(int(n) for n in self.n_grid)


@dataclass
class BoundsConfig:
    n_grid: tuple[int, ...] = (2, 10, 100, 1000, 10000)
    rmax: float = 11.7
    gamma: float = 0.99
    delta: float = 0.1
    horizon: int = 100

    def __post_init__(self) -> None:
        self.n_grid = tuple(int(n) for n in self.n_grid)


@dataclass
class RunConfig:
    env: str = "linereach"
    dataset_mix: str = "0.1"
    dataset_size: int = 20_000
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    schedule: TrainConfig = field(default_factory=TrainConfig)
    uq: UqConfig = field(default_factory=UqConfig)
    fig: FigConfig = field(default_factory=FigConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)

    def __post_init__(self) -> None:
        if self.env not in ENV_NAMES:
            raise ConfigError(f"env: unknown environment {self.env!r}; valid names: {', '.join(ENV_NAMES)}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if self.dataset_size < 1:
            raise ConfigError("dataset_size: must be >= 1")

    @property
    def strategy(self) -> str:
        return self.penalty.strategy

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "penalty": PenaltyConfig,
    "ensemble": EnsembleConfig,
    "sac": SacConfig,
    "schedule": TrainConfig,
    "uq": UqConfig,
    "fig": FigConfig,
    "bounds": BoundsConfig,
}


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(source: str, text: str, key: str) -> str:
    line = _line_of(text, key.split(".")[-1]) if text else None
    return f"{source}:{line}: " if line else f"{source}: "


def _build(cls, values: dict, prefix: str, source: str, text: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{_where(source, text, prefix)}{prefix}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            name = f"{prefix}.{key}" if prefix else key
            raise ConfigError(
                f"{_where(source, text, key)}unknown field {name!r}; valid fields: {', '.join(sorted(known))}"
            )
    kwargs = {}
    for key, value in values.items():
        name = f"{prefix}.{key}" if prefix else key
        if key in _SECTIONS and cls is RunConfig:
            kwargs[key] = _build(_SECTIONS[key], value, name, source, text)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{_where(source, text, prefix or 'env')}{prefix + ': ' if prefix else ''}{exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {prefix or 'config'}: {exc}") from None


def config_from_dict(values: dict, source: str = "<config>", text: str = "") -> RunConfig:
    return _build(RunConfig, values, "", source, text)


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a JSON config; missing fields take their defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        values = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    return config_from_dict(values, str(path), text)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
