"""Small helpers for JSON <-> dataclass configs with field-checked errors."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Type, TypeVar

from .errors import ConfigError

T = TypeVar("T")


def dataclass_from_dict(cls: Type[T], payload: dict[str, Any], context: str = "") -> T:
    """Build a dataclass from a plain dict, rejecting unknown or missing keys."""
    if not isinstance(payload, dict):
        raise ConfigError(f"{context or cls.__name__}: expected a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"{context or cls.__name__}: unknown field '{sorted(unknown)[0]}'")
    required = {
        f.name
        for f in dataclasses.fields(cls)
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
    }
    missing = required - set(payload)
    if missing:
        raise ConfigError(f"{context or cls.__name__}: missing field '{sorted(missing)[0]}'")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context or cls.__name__}: {exc}") from exc


def load_json(path: str | Path) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
