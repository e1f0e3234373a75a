"""Flat ``key = value`` configuration files with typed, documented key sets."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError

ENV_PREFIX = "CODISTILL_"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: Any
    doc: str = ""
    choices: tuple | None = None

    def parse(self, raw: Any) -> Any:
        if raw is None:
            return None
        if not isinstance(raw, str):
            value = raw
        elif self.type is bool:
            low = raw.strip().lower()
            if low in _TRUE:
                value = True
            elif low in _FALSE:
                value = False
            else:
                raise ConfigError(f"{self.name}: expected a boolean, got {raw!r}", key=self.name)
        elif self.type in (int, float):
            try:
                value = self.type(raw.strip())
            except ValueError:
                raise ConfigError(
                    f"{self.name}: expected {self.type.__name__}, got {raw!r}", key=self.name
                ) from None
        else:
            value = raw.strip()
        if self.type is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{self.name}: {value!r} not in {self.choices}", key=self.name)
        return value


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key=key)
        values[key] = value
    return values


def read_flat(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_flat(text, source=str(path))


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def format_flat(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def write_flat(path: str | Path, values: Mapping[str, Any]) -> None:
    Path(path).write_text(format_flat(values))


def resolve(
    schema: Iterable[Key],
    file_values: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> dict[str, Any]:
    """Merge defaults < file < environment < explicit overrides.

    Unknown keys in the file or overrides raise :class:`ConfigError`.
    Environment variables are ``CODISTILL_<KEY>`` (upper case).
    """
    keys = {k.name: k for k in schema}
    env = os.environ if env is None else env
    out = {name: k.default for name, k in keys.items()}
    for layer in (file_values or {}), (overrides or {}):
        for name in layer:
            if name not in keys:
                raise ConfigError(f"unknown config key {name!r}", key=name)
    for name, raw in (file_values or {}).items():
        out[name] = keys[name].parse(raw)
    for name, k in keys.items():
        env_name = ENV_PREFIX + name.upper()
        if env_name in env:
            out[name] = k.parse(env[env_name])
    for name, raw in (overrides or {}).items():
        out[name] = keys[name].parse(raw)
    return out


def describe(schema: Iterable[Key]) -> str:
    """One line per key: name, default and doc, for ``--help`` output."""
    return "\n".join(f"  {k.name} (default {format_value(k.default)!s}): {k.doc}" for k in schema)
