"""Plain-text ``key = value`` configuration files.

Keys are namespaced by section prefix::

    # comments start with '#'
    gen.shift_range = 2
    train.steps = 2000
    train.lr = 1e-3
    encoder.dim = 64

``gen.*`` maps onto GenSpec, ``train.*`` onto TrainRunConfig and
``encoder.*`` onto EncoderConfig. Values are coerced to the field's type.
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


def _coerce(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value.lower() in ("none", "null", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    try:
        if tp is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is tuple or origin is tuple:
            return tuple(s.strip() for s in value.split(",") if s.strip())
        return value
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {getattr(tp, '__name__', tp)}") from exc


def apply_section(obj, entries: dict, prefix: str):
    """Return a copy of dataclass ``obj`` with ``prefix.*`` entries applied."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in entries.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        updates[name] = _coerce(value, hints[name], key)
    return dataclasses.replace(obj, **updates)


def check_keys(entries: dict, prefixes) -> None:
    for key in entries:
        if key.split(".", 1)[0] not in prefixes:
            raise ConfigError(f"unknown config key {key!r} (expected one of the prefixes {sorted(prefixes)})")
