"""Plain-text ``key=value`` configuration files and typed config records."""

from __future__ import annotations

import dataclasses
import math
import typing
from pathlib import Path

from .errors import ConfigError


def parse_kv_lines(lines, origin: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        out[key] = value
    return out


def load_kv_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_kv_lines(path.read_text(encoding="utf-8").splitlines(), str(path))


def parse_overrides(items) -> dict:
    return parse_kv_lines(items or [], "<overrides>")


def _coerce(value, tp, key):
    if not isinstance(value, str):
        return value
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if value.lower() in ("none", "null", ""):
            return None
        return _coerce(value, inner[0], key)
    try:
        if tp is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return math.inf if value.lower() in ("inf", "full") else float(value)
        if origin is tuple or tp is tuple:
            elem = args[0] if args else str
            parts = [p for p in value.replace(",", " ").split() if p]
            return tuple(_coerce(p, elem, key) for p in parts)
        return value
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {getattr(tp, '__name__', tp)}") from exc


def build(cls, values: dict, prefix: str = "", strict: bool = True):
    """Instantiate dataclass ``cls`` from string values (keys optionally prefixed)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if prefix:
            if not key.startswith(prefix):
                continue
            key = key[len(prefix):]
        if key not in names:
            if strict:
                raise ConfigError(f"unknown config key {prefix}{key!r} for {cls.__name__}")
            continue
        kwargs[key] = _coerce(value, hints[key], prefix + key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def to_kv(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        out[prefix + f.name] = "none" if v is None else str(v)
    return out


def format_kv(d: dict) -> str:
    return "\n".join(f"{k} = {d[k]}" for k in sorted(d))


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 1
    batch_frames: int = 6000  # padded Fbank frames per batch
    lr: float = 2e-3
    warmup_steps: int = 100
    clip_norm: float = 5.0
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_frames < 1 or self.lr < 0:
            raise ConfigError("epochs >= 0, batch_frames >= 1 and lr >= 0 required")
