"""Flat ``key = value`` configuration text with dotted section keys.

Values are JSON literals where they parse as such (numbers, lists, true/false);
anything else is kept as a bare string. ``#`` starts a comment line.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Any


class ConfigError(ValueError):
    """Unknown key, malformed line or invalid value."""


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(p) for p in text.split(",")]
    return text


def format_value(value: Any) -> str:
    if isinstance(value, tuple):
        value = list(value)
    if isinstance(value, str):
        return value
    return json.dumps(value)


def parse_flat(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, sep, val = s.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source} line {n}: expected 'key = value', got {s!r}")
        if key in out:
            raise ConfigError(f"{source} line {n}: duplicate key {key!r}")
        out[key] = parse_value(val)
    return out


def format_flat(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def dataclass_fields(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def build_dataclass(cls, values: dict[str, Any], section: str = ""):
    """Instantiate ``cls`` from a subset of its fields; unknown keys are rejected."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    for k in values:
        if k not in names:
            raise ConfigError(f"unknown config key {section + '.' if section else ''}{k}")
    kw = {}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section or cls.__name__} config: {exc}") from exc
