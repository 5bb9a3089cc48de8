"""Minimal TOML read/write for flat run configs.

Reading uses the stdlib parser (tomllib, or tomli on 3.10). Writing covers
exactly the value types RunConfig serializes: strings, bools, ints, floats,
and homogeneous lists; None-valued keys are omitted.
"""

from __future__ import annotations

import json

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {type(value).__name__} to TOML")


def dump_toml(d: dict) -> str:
    lines = []
    for key in d:
        if d[key] is None:
            continue
        lines.append(f"{key} = {_fmt(d[key])}")
    return "\n".join(lines) + "\n"


def load_toml(path) -> dict:
    with open(path, "rb") as f:
        return tomllib.load(f)


def loads_toml(text: str) -> dict:
    return tomllib.loads(text)
