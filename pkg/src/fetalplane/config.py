"""Line-based ``key = value`` run configuration.

Keys are exactly the field names of :class:`ModelConfig` and :class:`TrainConfig`.
Blank lines and ``#`` comments are ignored.  ``preset = <name>`` (first) pulls in a
shipped file such as ``b0_ssa``.
"""

from __future__ import annotations

import dataclasses
import difflib
import typing
from importlib import resources
from pathlib import Path

from .backbone import ConfigError
from .model import ModelConfig
from .training import TrainConfig

MODEL_PRESETS = ("micro_ssa", "b0_ssa", "v2b0")


class UnknownKeyError(ConfigError):
    pass


def _fields(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


MODEL_KEYS = _fields(ModelConfig)
TRAIN_KEYS = _fields(TrainConfig)
VALID_KEYS = tuple(MODEL_KEYS) + tuple(k for k in TRAIN_KEYS if k not in MODEL_KEYS)


def unknown_key_message(key: str) -> str:
    close = difflib.get_close_matches(key, VALID_KEYS, n=1, cutoff=0.6)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return f"unknown config key {key!r}{hint} valid keys: {', '.join(VALID_KEYS)}"


def _convert(key: str, raw: str, kind):
    raw = raw.strip()
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.lower() in ("none", ""):
            return None
        kind = next(a for a in args if a is not type(None))
        origin = typing.get_origin(kind)
    try:
        if origin is tuple:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    return raw


def parse_config_text(text: str, source: str = "<string>") -> dict[str, object]:
    """Parse to a typed ``{key: value}`` dict; unknown keys raise :class:`UnknownKeyError`."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            values.update(load_config(raw))
            continue
        if key not in VALID_KEYS:
            raise UnknownKeyError(f"{source}:{lineno}: {unknown_key_message(key)}")
        values[key] = coerce(key, raw)
    return values


def coerce(key: str, raw: str):
    if key not in VALID_KEYS:
        raise UnknownKeyError(unknown_key_message(key))
    kind = MODEL_KEYS.get(key) or TRAIN_KEYS[key]
    return _convert(key, raw, kind)


def load_config(name_or_path: str | Path) -> dict[str, object]:
    """Read a config file, or a shipped preset by name."""
    if str(name_or_path) in MODEL_PRESETS:
        text = resources.files("fetalplane.configs").joinpath(f"{name_or_path}.cfg").read_text()
        return parse_config_text(text, f"preset:{name_or_path}")
    path = Path(name_or_path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def split_configs(values: dict[str, object]) -> tuple[ModelConfig, TrainConfig]:
    """Build validated configs; keys shared by both go to both."""
    model = ModelConfig(**{k: v for k, v in values.items() if k in MODEL_KEYS})
    train = TrainConfig(**{k: v for k, v in values.items() if k in TRAIN_KEYS})
    model.validate()
    try:
        train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return model, train
