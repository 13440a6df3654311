"""JSON (de)serialization for nested dataclass configurations."""

from __future__ import annotations

import dataclasses
import enum
import json
import typing

import numpy as np

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def to_dict(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_dict(x) for x in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _coerce(value, default, hint, where):
    if dataclasses.is_dataclass(hint) and isinstance(hint, type):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return from_dict(hint, value, where)
    if isinstance(default, np.ndarray):
        arr = np.asarray(value, dtype=float)
        if arr.shape != default.shape:
            raise ConfigError(f"{where}: expected shape {default.shape}, got {arr.shape}")
        return arr
    if isinstance(default, tuple):
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        if isinstance(default, int) and not float(value).is_integer():
            raise ConfigError(f"{where}: expected an integer")
        return type(default)(value)
    return value


def from_dict(cls, data, where=""):
    """Build ``cls`` from a dict, keeping defaults for missing keys and rejecting unknown ones."""
    hints = typing.get_type_hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {sorted(unknown)}")
    base = cls()
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(value, getattr(base, name), hints.get(name), f"{where}.{name}".lstrip("."))
    try:
        return dataclasses.replace(base, **kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def load_json(cls, path_or_dict, section=None):
    """Load a versioned config; ``section`` selects a sub-object of the file."""
    if isinstance(path_or_dict, dict):
        data = dict(path_or_dict)
    else:
        with open(path_or_dict) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path_or_dict}: invalid JSON ({exc.msg})") from exc
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    if section is not None:
        data = data.get(section, {})
    return from_dict(cls, data)


def dump_json(sections: dict, path):
    out = {"schema_version": SCHEMA_VERSION}
    out.update({k: to_dict(v) for k, v in sections.items()})
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)
