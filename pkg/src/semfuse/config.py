"""Flat ``key = value`` run configuration covering ModelConfig and TrainConfig fields."""

from __future__ import annotations

import dataclasses
import re
import types
import typing
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig

RUN_KEYS = {"run_id": "run"}
# recorded by ``train`` in the resolved snapshot so a run can be re-issued from it
PROVENANCE_KEYS = ("data", "image_root")
RUN_ID_RE = re.compile(r"[A-Za-z0-9._-]+")


class ConfigError(ValueError):
    pass


def _fields(cls) -> dict[str, dataclasses.Field]:
    hints = typing.get_type_hints(cls)
    return {f.name: (f, hints[f.name]) for f in dataclasses.fields(cls)}


MODEL_FIELDS = _fields(ModelConfig)
TRAIN_FIELDS = _fields(TrainConfig)
KNOWN_KEYS = set(MODEL_FIELDS) | set(TRAIN_FIELDS) | set(RUN_KEYS) | set(PROVENANCE_KEYS)


def _parse_value(key: str, raw: str, hint):
    raw = raw.strip()
    args = typing.get_args(hint)
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if origin is tuple:
            return tuple(int(x) for x in raw.replace("(", "").replace(")", "").split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(pairs: dict[str, str]) -> tuple[ModelConfig, TrainConfig, dict]:
    unknown = set(pairs) - KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model_kw = {k: _parse_value(k, v, MODEL_FIELDS[k][1]) for k, v in pairs.items() if k in MODEL_FIELDS}
    train_kw = {k: _parse_value(k, v, TRAIN_FIELDS[k][1]) for k, v in pairs.items() if k in TRAIN_FIELDS}
    run = dict(RUN_KEYS)
    run.update({k: v.strip() for k, v in pairs.items() if k in RUN_KEYS or k in PROVENANCE_KEYS})
    if not RUN_ID_RE.fullmatch(run["run_id"]) or run["run_id"] in (".", ".."):
        raise ConfigError(f"run_id must be a plain directory name, got {run['run_id']!r}")
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw), run
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def read_pairs(path: str | Path | None) -> dict[str, str]:
    if path is None:
        return {}
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_overrides(items) -> dict[str, str]:
    pairs = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value
    return pairs


def load_config(path=None, overrides=None) -> tuple[ModelConfig, TrainConfig, dict]:
    pairs = read_pairs(path)
    pairs.update(parse_overrides(overrides))
    return parse_pairs(pairs)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig, run: dict) -> str:
    items = {**dataclasses.asdict(model_cfg), **dataclasses.asdict(train_cfg), **run}
    return "".join(f"{k} = {_fmt(items[k])}\n" for k in sorted(items))
