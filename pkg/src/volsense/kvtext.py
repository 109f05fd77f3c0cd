"""Flat ``key = value`` text for dataclass configs.

Values are typed from the dataclass annotations; tuples are written as
comma-separated lists.  Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import typing
from typing import Any


class ConfigError(ValueError):
    pass


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if value is None:
        return ""
    return str(value)


def _parse(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            inner = [a for a in args if a is not type(None)]
            return None if raw == "" else _parse(raw, inner[0], key)
        if origin in (tuple, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if origin is tuple and args and args[-1] is not Ellipsis:
                if len(items) != len(args):
                    raise ConfigError(f"{key}: expected {len(args)} values, got {len(items)}")
                return tuple(_parse(s, a, key) for s, a in zip(items, args))
            return origin(_parse(s, args[0], key) for s in items)
        if tp is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ConfigError(f"{key}: expected true/false, got {raw!r}")
            return raw.lower() in ("true", "1")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp}") from exc


def parse_lines(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def dump(obj) -> str:
    return "".join(f"{f.name} = {_format(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))


def load(cls, text: str, **overrides):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    raw = parse_lines(text)
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _parse(v, hints[k], k) for k, v in raw.items()}
    values.update(overrides)
    return cls(**values)
