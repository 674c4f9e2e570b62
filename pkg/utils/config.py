"""Experiment configuration: packaged TOML defaults, user file, ``--set`` overrides, schema check."""
import copy
import json
import logging
import os
from pathlib import Path

import jsonschema
import toml

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
DEFAULT_CONFIG = DATA_DIR / "default_config.toml"
SCHEMA_FILE = DATA_DIR / "config_schema.json"
OUTPUT_ROOT_ENV = "RDP_OUTPUT_ROOT"
RESOLVED_NAME = "config.resolved.toml"


def deep_merge(base, override):
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(text):
    """``section.key=value`` into a nested dict; the value is read as a TOML literal, else kept as text."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    dotted, raw = text.split("=", 1)
    keys = [k.strip() for k in dotted.split(".") if k.strip()]
    if not keys:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = toml.loads(f"value = {raw.strip()}")["value"]
    except toml.TomlDecodeError:
        value = raw.strip()
    nested = value
    for key in reversed(keys):
        nested = {key: nested}
    return nested


def _read_toml(path):
    try:
        return toml.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc


def validate(config):
    schema = json.loads(SCHEMA_FILE.read_text())
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(config), key=lambda e: list(e.path))
    if errors:
        lines = [f"{'.'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))
    return config


def load_config(path=None, overrides=()):
    config = _read_toml(DEFAULT_CONFIG)
    if path is not None:
        config = deep_merge(config, _read_toml(path))
    for text in overrides:
        config = deep_merge(config, parse_override(text))
    return validate(config)


def output_dir(config):
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
    return root / config["output"]["directory"] / config["problem"]


def write_resolved(config, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_NAME
    path.write_text(toml.dumps(config))
    logger.debug("wrote resolved config to %s", path)
    return path


def seed(config, name):
    return int(config["seeds"][name])
