"""Run configuration: an INI file with fixed sections, command-line overrides, exact echo.

Every key has a default, so an empty file is a valid config. Unknown
sections or keys are rejected. Floats are written with ``repr`` so the
echoed file parses back to the same values bit for bit.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .losses import LossWeights
from .metrics import DepthEvalConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration (maps to exit code 2)."""


@dataclass
class RunSection:
    seed: int = 0
    init_depth: float = 5.0
    prior_init: float = 1.0


@dataclass
class SynthSection:
    scene: str = "random"  # random | static | lateral_object | follow
    num_sequences: int = 1
    num_frames: int = 3
    n_objects: int = 0
    background: str = "any"  # any | plane | ground_wall (random scenes only)
    width: int = 64
    height: int = 64
    texture_scale: float = 12.0
    translation: float = 0.1
    rotation: float = 0.01
    object_speed: float = 0.15

    def __post_init__(self):
        if self.scene not in ("random", "static", "lateral_object", "follow"):
            raise ValueError(f"unknown scene kind {self.scene!r}")
        if self.background not in ("any", "plane", "ground_wall"):
            raise ValueError(f"unknown background {self.background!r}")
        if self.num_sequences < 1 or self.num_frames < 3:
            raise ValueError("need num_sequences >= 1 and num_frames >= 3")
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")


@dataclass
class DataSection:
    dataset: str = ""
    checkpoint: str = ""
    predictions: str = ""


@dataclass
class FlagSection:
    enable_motion_model: bool = True
    enable_size_constraint: bool = True
    enable_refinement: bool = True


@dataclass
class VizSection:
    near: float = 1.0
    far: float = 20.0
    max_error: float = 0.5

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("viz needs 0 < near < far")
        if not self.max_error > 0:
            raise ValueError("viz max_error must be positive")


SECTIONS = {
    "run": RunSection,
    "synth": SynthSection,
    "data": DataSection,
    "flags": FlagSection,
    "train": TrainConfig,
    "loss": LossWeights,
    "eval": DepthEvalConfig,
    "viz": VizSection,
}
# set from [flags] instead
_HIDDEN = {("train", "motion_model")}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    synth: SynthSection = field(default_factory=SynthSection)
    data: DataSection = field(default_factory=DataSection)
    flags: FlagSection = field(default_factory=FlagSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: DepthEvalConfig = field(default_factory=DepthEvalConfig)
    viz: VizSection = field(default_factory=VizSection)

    def train_config(self) -> TrainConfig:
        """Training settings with the motion-model flag applied."""
        return dataclasses.replace(self.train, motion_model=self.flags.enable_motion_model)

    def loss_weights(self) -> LossWeights:
        """Loss weights with the size-constraint flag applied."""
        if self.flags.enable_size_constraint:
            return self.loss
        return dataclasses.replace(self.loss, w_size=0.0)


def _keys(section: str) -> list[dataclasses.Field]:
    return [f for f in dataclasses.fields(SECTIONS[section]) if (section, f.name) not in _HIDDEN]


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if isinstance(default, dict):
            out = {}
            for part in (p.strip() for p in raw.split(",")):
                if not part:
                    continue
                key, sep, val = part.rpartition(":")
                if not sep or not key:
                    raise ValueError(f"expected prefix:value, got {part!r}")
                out[key.strip()] = float(val)
            return out
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{v!r}" for k, v in sorted(value.items()))
    return str(value)


def _build(values: dict[str, dict[str, str]]) -> RunConfig:
    sections = {}
    for name, cls in SECTIONS.items():
        defaults = cls()
        kwargs = {}
        for f in _keys(name):
            if f.name in values.get(name, {}):
                kwargs[f.name] = _parse_value(values[name][f.name], getattr(defaults, f.name), f"{name}.{f.name}")
        try:
            sections[name] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    return RunConfig(**sections)


def _check_known(section: str, key: str | None = None) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    if key is not None and key not in {f.name for f in _keys(section)}:
        raise ConfigError(f"unknown key {key!r} in [{section}]")


def parse_overrides(items: Iterable[str]) -> dict[str, dict[str, str]]:
    """``section.key=value`` strings as nested raw values."""
    out: dict[str, dict[str, str]] = {}
    for item in items:
        lhs, sep, rhs = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        _check_known(section, key)
        out.setdefault(section, {})[key] = rhs
    return out


def read_text(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        _check_known(section)
        for key, raw in parser.items(section):
            _check_known(section, key)
            values.setdefault(section, {})[key] = raw
    for section, kv in parse_overrides(overrides).items():
        values.setdefault(section, {}).update(kv)
    return _build(values)


def load(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    if path is None:
        return read_text("", overrides)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return read_text(path.read_text(), overrides)


def dump(cfg: RunConfig) -> str:
    """Fully-resolved config text; ``read_text(dump(c)) == c``."""
    lines = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        lines.append(f"[{name}]")
        lines.extend(f"{f.name} = {_format_value(getattr(sec, f.name))}" for f in _keys(name))
        lines.append("")
    return "\n".join(lines)
