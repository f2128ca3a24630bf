"""Flat ``key = value`` config documents mirroring :class:`RunConfig`.

Keys are the RunConfig field names with dashes or underscores accepted
interchangeably; ``#`` starts a comment. Resolution order is defaults, then
file, then command-line flags.
"""
from __future__ import annotations

import typing
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .pipeline import RunConfig

_HINTS = typing.get_type_hints(RunConfig)
FIELDS = {f.name: f for f in fields(RunConfig)}


def field_type(name: str):
    return _HINTS[name]


def flag_name(name: str) -> str:
    return "--" + name.replace("_", "-")


def _key(raw: str) -> str:
    return raw.strip().replace("-", "_")


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(name: str, text: str):
    if name not in FIELDS:
        raise ConfigError(f"unknown config key {name.replace('_', '-')!r}")
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    kind = field_type(name)
    try:
        if kind is bool:
            value = parse_bool(text)
        elif kind is int:
            value = int(text)
        elif kind is float:
            value = float(text)
        else:
            value = text
    except ValueError:
        raise ConfigError(f"{name.replace('_', '-')}: cannot parse {text!r} as {kind.__name__}") from None
    choices = FIELDS[name].metadata.get("choices")
    if choices and value not in choices:
        raise ConfigError(f"{name.replace('_', '-')}: {value!r} is not one of {', '.join(choices)}")
    return value


def parse_document(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        raw_key, raw_value = line.split("=", 1)
        key = _key(raw_key)
        if key not in FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {raw_key.strip()!r}")
        values[key] = coerce(key, raw_value)
    return values


def load_document(path) -> dict:
    return parse_document(Path(path).read_text(encoding="utf-8"))


def resolve(file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Merge defaults < file < flags into a RunConfig (not yet task-resolved)."""
    merged = {}
    for source in (file_values or {}, flag_values or {}):
        for key, value in source.items():
            key = _key(key)
            if key not in FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                merged[key] = value
    return RunConfig(**merged)


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    """Canonical document: one ``key = value`` line per field, in declaration order."""
    return "".join(f"{name.replace('_', '-')} = {_render(getattr(cfg, name))}\n" for name in FIELDS)
