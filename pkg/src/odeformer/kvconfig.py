"""Flat ``key=value`` text serialization for config dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


def _coerce(kind, value: str):
    origin = typing.get_origin(kind)
    if origin is typing.Union:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        if value.lower() in ("", "none"):
            return None
        return _coerce(args[0], value)
    if kind is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    return value


def parse_pairs(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def from_pairs(cls, pairs: dict[str, str], strict: bool = True):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in pairs.items():
        if key not in names:
            if strict:
                raise ValueError(f"unknown {cls.__name__} key {key!r}")
            continue
        kwargs[key] = _coerce(hints[key], value)
    return cls(**kwargs)


def to_text(obj) -> str:
    return "".join(f"{k}={'' if v is None else v}\n" for k, v in dataclasses.asdict(obj).items())


def from_text(cls, text: str):
    return from_pairs(cls, parse_pairs(text))


class KVConfig:
    """Mixin giving a dataclass ``to_text``/``from_text``/``save``/``load``."""

    def to_text(self) -> str:
        return to_text(self)

    @classmethod
    def from_text(cls, text: str):
        return from_text(cls, text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())
