"""Plain-text ``key = value`` run configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

from .training import TrainConfig

PATH_KEYS = ("model", "data", "out_model", "loss_csv")
_INT_KEYS = {"steps", "batch_size", "rank", "bits", "group_size", "seed"}
_FLOAT_KEYS = {"learning_rate", "beta1", "beta2", "eps", "max_grad_norm"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    paths: dict = field(default_factory=dict)


def _parse_value(key: str, raw: str, lineno: int):
    try:
        if key in _INT_KEYS:
            return int(raw, 0)
        if key in _FLOAT_KEYS:
            value = float(raw)
            if math.isnan(value):
                raise ValueError
            return value
        if key == "scale":
            return None if raw.lower() in ("auto", "none", "") else float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None
    return raw


def parse_run_config(text: str) -> RunConfig:
    known = {f.name for f in fields(TrainConfig)}
    values, paths = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values or key in paths:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key in PATH_KEYS:
            paths[key] = raw
        elif key in known:
            values[key] = _parse_value(key, raw, lineno)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        return RunConfig(TrainConfig(**values), paths)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def format_run_config(cfg: TrainConfig, paths: dict | None = None) -> str:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'auto' if value is None else value}")
    for key, value in (paths or {}).items():
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
