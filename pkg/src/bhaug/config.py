"""Flat ``key = value`` config files.

Keys are TrainConfig field names; PrototypeConfig fields take a ``proto.``
prefix.  Blank lines and ``#`` comments are ignored.  Example::

    outer = 3
    inner = 2
    lambda_adv = 0.01
    augment = guided
    proto.epochs = 60
"""

from __future__ import annotations

from dataclasses import asdict, fields, replace
from pathlib import Path

from .advtune import TrainConfig
from .errors import ParseError
from .prototypenet import PrototypeConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, default, key, lineno, path):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError
            return low in _TRUE
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ParseError(f"{key}: cannot read {raw!r} as {type(default).__name__}", lineno, path) from None
    return raw


def parse_config_text(text: str, path=None) -> dict:
    """{key: raw string}; duplicate keys and malformed lines are errors."""
    out, seen = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip().replace("-", "_"), value.strip()
        if not sep or not key:
            raise ParseError(f"expected key = value, got {line!r}", lineno, path)
        if key in seen:
            raise ParseError(f"{key} already set on line {seen[key]}", lineno, path)
        seen[key] = lineno
        out[key] = (value, lineno)
    return out


def apply_config(raw: dict, train: TrainConfig | None = None, proto: PrototypeConfig | None = None, path=None):
    """Overlay parsed values onto the given (or default) configs."""
    train = train or TrainConfig()
    proto = proto or PrototypeConfig()
    tdefaults = asdict(train)
    pdefaults = asdict(proto)
    t_upd, p_upd = {}, {}
    for key, (value, lineno) in raw.items():
        if key.startswith("proto."):
            name = key[len("proto."):]
            if name not in pdefaults:
                raise ParseError(f"unknown prototype key {key!r}", lineno, path)
            p_upd[name] = _coerce(value, pdefaults[name], key, lineno, path)
        elif key in tdefaults:
            t_upd[key] = _coerce(value, tdefaults[key], key, lineno, path)
        else:
            raise ParseError(f"unknown config key {key!r}", lineno, path)
    return replace(train, **t_upd), replace(proto, **p_upd)


def load_config(path, train=None, proto=None):
    path = Path(path)
    return apply_config(parse_config_text(path.read_text(), path), train, proto, path)


def dump_config(train: TrainConfig, proto: PrototypeConfig | None = None) -> str:
    lines = [f"{f.name} = {getattr(train, f.name)}" for f in fields(train)]
    if proto is not None:
        lines += [f"proto.{f.name} = {getattr(proto, f.name)}" for f in fields(proto)]
    return "\n".join(lines) + "\n"
