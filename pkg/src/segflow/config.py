"""Plain-text ``key=value`` configuration files and flag merging."""

import logging
from pathlib import Path

from .errors import ConfigError

log = logging.getLogger(__name__)


def parse_config(text, source="<config>"):
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def read_config(path):
    path = Path(path)
    try:
        return parse_config(path.read_text(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def format_config(values):
    return "".join(f"{k}={_fmt(v)}\n" for k, v in values.items())


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def coerce(value, like):
    """Convert a config string to the type of the default ``like``."""
    if not isinstance(value, str):
        return value
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"expected {type(like).__name__}, got {value!r}") from exc
    if isinstance(like, tuple):
        return tuple(coerce(v.strip(), like[0]) for v in value.split(",") if v.strip())
    return value


def merge(defaults, file_values, flag_values):
    """Flag > file > default. Keys unknown to ``defaults`` are rejected; a flag
    overriding a different file value is logged and listed in the result.
    """
    unknown = sorted(set(file_values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(defaults)
    overridden = []
    for key, value in file_values.items():
        merged[key] = coerce(value, defaults[key])
    for key, value in flag_values.items():
        if value is None:
            continue
        value = coerce(value, defaults[key])
        if key in file_values and coerce(file_values[key], defaults[key]) != value:
            log.warning("flag --%s=%s overrides config file value %s", key, value, file_values[key])
            overridden.append(key)
        merged[key] = value
    return merged, overridden
