"""Run configuration: one YAML file plus repeatable key=value overrides.

A RunConfig aggregates every component config. Files may specify any subset;
unspecified fields keep their defaults. Overrides use dotted paths into the
nested dataclasses ("trainer.total_steps=500") and are type-checked against
the target field, so a typo or a wrong type fails loudly instead of training
with a silently ignored setting.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .core_types import ModelConfig
from .data_pipeline import AugmentConfig, SyntheticSceneSpec
from .metrics_eval import EvalProtocolConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    """Bad config file, unknown key, or ill-typed value."""


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval_protocol: EvalProtocolConfig = field(default_factory=EvalProtocolConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    synth: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    data_root: str = "data"
    out_dir: str = "runs/default"
    seed: int = 0


def _hints(dc_type) -> dict[str, type]:
    return typing.get_type_hints(dc_type)


def _coerce_scalar(text: str, target, key: str):
    origin = typing.get_origin(target)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(target) if a is not type(None)]
        if text.lower() in ("none", "null"):
            return None
        return _coerce_scalar(text, args[0], key)
    if origin is tuple:
        parts = [p.strip() for p in text.split(",")]
        args = typing.get_args(target)
        if len(args) == 2 and args[1] is Ellipsis:
            args = [args[0]] * len(parts)
        if len(parts) != len(args):
            raise ConfigError(f"key '{key}' expects {len(args)} comma-separated values")
        return tuple(_coerce_scalar(p, a, key) for p, a in zip(parts, args))
    if target is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key '{key}' expects a boolean, got '{text}'")
    if target is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"key '{key}' expects an integer, got '{text}'") from None
    if target is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"key '{key}' expects a number, got '{text}'") from None
    if target is str:
        return text
    raise ConfigError(f"key '{key}' has unsupported type {target}")


def _check_value(value, target, key: str):
    """Validate a YAML-decoded value against the annotated field type."""
    origin = typing.get_origin(target)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(target) if a is not type(None)]
        if value is None:
            return None
        return _check_value(value, args[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"key '{key}' expects a sequence")
        args = typing.get_args(target)
        if len(args) == 2 and args[1] is Ellipsis:
            args = [args[0]] * len(value)
        if len(value) != len(args):
            raise ConfigError(f"key '{key}' expects {len(args)} values, got {len(value)}")
        return tuple(_check_value(v, a, key) for v, a in zip(value, args))
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"key '{key}' expects a boolean, got {value!r}")
        return value
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{key}' expects an integer, got {value!r}")
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{key}' expects a number, got {value!r}")
        return float(value)
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"key '{key}' expects a string, got {value!r}")
        return value
    raise ConfigError(f"key '{key}' has unsupported type {target}")


def _build(dc_type, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{prefix.rstrip('.') or '<root>'}' must be a mapping")
    hints = _hints(dc_type)
    names = {f.name for f in dataclasses.fields(dc_type)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        target = hints[key]
        if dataclasses.is_dataclass(target):
            kwargs[key] = _build(target, value if value is not None else {}, f"{prefix}{key}.")
        else:
            kwargs[key] = _check_value(value, target, f"{prefix}{key}")
    return dc_type(**kwargs)


def _apply_override(data: dict, spec: str) -> None:
    key, sep, raw = spec.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override '{spec}' must have the form key=value")
    parts = key.split(".")
    dc_type = RunConfig
    for i, part in enumerate(parts):
        hints = _hints(dc_type)
        if part not in {f.name for f in dataclasses.fields(dc_type)}:
            raise ConfigError(f"unknown config key '{key}'")
        target = hints[part]
        last = i == len(parts) - 1
        if dataclasses.is_dataclass(target):
            if last:
                raise ConfigError(f"key '{key}' names a section, not a value")
            dc_type = target
        elif not last:
            raise ConfigError(f"unknown config key '{key}'")
        else:
            node = data
            for p in parts[:-1]:
                node = node.setdefault(p, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"key '{key}' conflicts with a scalar in the config file")
            node[parts[-1]] = _coerce_scalar(raw.strip(), target, key)


def load_run_config(path: str | Path | None = None,
                    overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {p} is not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must contain a mapping at top level")
        data = loaded
    for spec in overrides or []:
        _apply_override(data, spec)
    run = _build(RunConfig, data, "")
    problems = run.model.validate()
    if problems:
        raise ConfigError("invalid model config: " + "; ".join(problems))
    return run
