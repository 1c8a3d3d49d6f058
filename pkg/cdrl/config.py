"""Experiment configuration: flat ``section.key = value`` files plus overrides.

Resolution order is built-in defaults, then the config file, then ``--set``
overrides, then dedicated command-line flags.
"""

from __future__ import annotations

import dataclasses
import difflib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .evaluation import NoiseSpec
from .gate import GateConfig
from .pong import EnvConfig
from .qnet import MODEL_KINDS, ModelConfig
from .trainer import TrainConfig

COMMANDS = ("train", "eval", "grid", "generalize", "sweep", "report")

SWEEP_AXES: dict[str, tuple[str, tuple[str, ...]]] = {
    "expansion": ("grc_dim", ("2048", "4096", "8192", "16384")),
    "fan_in": ("fan_in", ("2", "5", "16", "full")),
    "topk_fraction": ("topk_fraction", ("0.01", "0.05", "0.1", "0.25", "1.0")),
}


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 50
    workers: int = 1
    max_episode_steps: int = 50000

    def __post_init__(self):
        for name in ("episodes", "workers", "max_episode_steps"):
            value = getattr(self, name)
            if value < 1:
                raise ConfigError(f"eval.{name} must be >= 1, got {value}")


@dataclass(frozen=True)
class SweepConfig:
    """One sensitivity axis; empty ``values`` means the axis' default set."""

    axis: str | None = None
    values: tuple[str, ...] = ()

    def __post_init__(self):
        if self.axis is not None and self.axis not in SWEEP_AXES:
            raise ConfigError(
                f"sweep.axis must be one of {tuple(SWEEP_AXES)}, got {self.axis!r}"
            )

    def model_overrides(self, base: ModelConfig) -> list[tuple[str, ModelConfig]]:
        """(value label, model config) per point on the axis."""
        if self.axis is None:
            raise ConfigError("sweep needs sweep.axis to be set")
        field_name, defaults = SWEEP_AXES[self.axis]
        hint = typing.get_type_hints(ModelConfig)[field_name]
        points = []
        for raw in self.values or defaults:
            value = _coerce(raw, hint, f"sweep.values ({self.axis})")
            points.append((raw, dataclasses.replace(base, **{field_name: value})))
        return points


@dataclass(frozen=True)
class ExperimentSpec:
    command: str = "train"
    model_kind: str = "cdrl"
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    out_dir: str = "runs"
    checkpoints: tuple[str, ...] = ()

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(
                f"command must be one of {COMMANDS}, got {self.command!r}"
            )
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(
                f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}"
            )
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")


SECTIONS: dict[str, type] = {
    "env": EnvConfig,
    "model": ModelConfig,
    "gate": GateConfig,
    "train": TrainConfig,
    "noise": NoiseSpec,
    "eval": EvalConfig,
    "sweep": SweepConfig,
}
TOP_LEVEL = ("command", "model_kind", "seeds", "out_dir", "checkpoints")


def known_keys() -> list[str]:
    keys = list(TOP_LEVEL)
    for section, cls in SECTIONS.items():
        keys += [f"{section}.{f.name}" for f in dataclasses.fields(cls)]
    return keys


def _unknown_key(key: str) -> ConfigError:
    keys = known_keys()
    bare = {k.rsplit(".", 1)[-1]: k for k in keys}
    close = difflib.get_close_matches(key, keys, n=1) or [
        bare[m] for m in difflib.get_close_matches(key.rsplit(".", 1)[-1], bare, n=1)
    ]
    hint = f"; did you mean '{close[0]}'?" if close else ""
    return ConfigError(f"unknown config key '{key}'{hint}")


def _type_name(hint: Any) -> str:
    return getattr(hint, "__name__", None) or str(hint)


_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def _coerce(raw: str, hint: Any, key: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin in (typing.Union, types.UnionType):
            if raw.lower() in ("none", "full", ""):
                return None
            inner = next(a for a in args if a is not type(None))
            return _coerce(raw, inner, key)
        if origin is tuple:
            if not raw:
                return ()
            item = args[0]
            if typing.get_origin(item) is tuple:
                return tuple(
                    tuple(int(n) for n in part.strip().split("x"))
                    for part in raw.split(",")
                )
            return tuple(_coerce(part, item, key) for part in raw.split(","))
        if hint is bool:
            if raw.lower() in _TRUE:
                return True
            if raw.lower() in _FALSE:
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
    except (ValueError, StopIteration) as e:
        raise ConfigError(f"{key}: expected {_type_name(hint)}, got {raw!r}") from e
    raise ConfigError(f"{key}: unsupported field type {_type_name(hint)}")


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(
            "x".join(str(n) for n in item) if isinstance(item, tuple) else _format(item)
            for item in value
        )
    return str(value)


def read_config_file(path: Path) -> dict[str, str]:
    """``key = value`` pairs from a file; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def build_spec(values: dict[str, str]) -> ExperimentSpec:
    sections: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    top: dict[str, Any] = {}
    top_hints = typing.get_type_hints(ExperimentSpec)
    for key, raw in values.items():
        if key in TOP_LEVEL:
            top[key] = _coerce(raw, top_hints[key], key)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise _unknown_key(key)
        hints = typing.get_type_hints(SECTIONS[section])
        if name not in hints:
            raise _unknown_key(key)
        sections[section][name] = _coerce(raw, hints[name], key)

    built = {name: SECTIONS[name](**fields) for name, fields in sections.items()}
    spec = ExperimentSpec(**top, **built)
    if spec.model_kind == "cdrl" and not spec.gate.enabled:
        spec = dataclasses.replace(spec, model_kind="cdrl_no_dendrite")
    elif spec.model_kind == "cdrl_no_dendrite" and spec.gate.enabled:
        gate = dataclasses.replace(spec.gate, enabled=False)
        spec = dataclasses.replace(spec, gate=gate)
    return spec


def parse_config(
    path: Path | None = None, overrides: list[str] | None = None, **flags: Any
) -> ExperimentSpec:
    """Layered resolution; ``flags`` are keyed values such as ``seeds="1,2"``."""
    values: dict[str, str] = {}
    if path is not None:
        values.update(read_config_file(path))
    values.update(parse_overrides(overrides or []))
    values.update({k: str(v) for k, v in flags.items() if v is not None})
    return build_spec(values)


def dump_spec(spec: ExperimentSpec) -> str:
    lines = [f"{key} = {_format(getattr(spec, key))}" for key in TOP_LEVEL]
    for section in SECTIONS:
        lines.append("")
        config = getattr(spec, section)
        for f in dataclasses.fields(config):
            lines.append(f"{section}.{f.name} = {_format(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def write_spec(spec: ExperimentSpec, path: Path) -> Path:
    path = Path(path)
    path.write_text(dump_spec(spec))
    return path
