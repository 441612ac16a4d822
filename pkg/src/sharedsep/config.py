"""TOML run configuration: file loading, flag merging and resolved snapshots."""
from __future__ import annotations

import os
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigError

CONFIG_ENV = "SHAREDSEP_CONFIG"


def load_config(path: str | os.PathLike | None = None) -> dict:
    """Read a TOML config; falls back to ``$SHAREDSEP_CONFIG`` and then to an empty config."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return {}
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def section(config: dict, name: str) -> dict:
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    return dict(value)


def merge(base: dict, overrides: dict) -> dict:
    """Overlay non-None ``overrides`` on ``base``; nested tables merge key by key."""
    out = dict(base)
    for k, v in overrides.items():
        if v is None:
            continue
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items() if v is not None}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def write_resolved(path, config: dict):
    with open(path, "wb") as fh:
        tomli_w.dump(_plain(config), fh)
