"""Versioned JSON schemas for every file the command line writes or reads."""
from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path

import jsonschema

from ..errors import ConfigError

HERE = Path(__file__).parent
NAMES = ("config", "fit", "calibrate", "report", "manifest")


@lru_cache(maxsize=None)
def load_schema(name):
    if name not in NAMES:
        raise KeyError(name)
    return json.loads((HERE / f"{name}.schema.json").read_text())


def validate_instance(instance, name):
    """Raise ConfigError naming the first violation, if any."""
    try:
        jsonschema.validate(instance, load_schema(name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{name} does not match its schema at {where}: {exc.message}") from None
