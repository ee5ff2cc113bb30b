"""Flat ``key = value`` configuration files, ``--set`` overrides and presets.

Keys are the flattened :class:`TrainConfig` names: top-level fields as-is,
nested sections as ``model.x``, ``loss.x`` and ``aug.x``. Values are typed
by the field they set. Tuples are written comma-separated (``aug.scale =
0.4, 1.0``); nested tuples as JSON (``model.stages = [[32, 2], [64, 2]]``).
Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import enum
import json
from dataclasses import fields
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigError
from .trainer import TrainConfig, config_from_dict, config_to_dict

# Ablation sweeps exposed as named override bundles.
PRESETS: dict[str, dict[str, str]] = {
    **{f"alpha-{a}": {"loss.alpha": a} for a in ("0", "0.05", "0.1", "0.3", "0.7", "1.0")},
    **{f"tau-{t}": {"loss.tau": t} for t in ("0.1", "0.2", "0.3")},
    **{f"m0-{m}": {"ema_base": m} for m in ("0.99", "0.996", "0.999")},
    # reference learning rates 0.3 / 0.5 / 1.0, rescaled so 0.3 is the default
    **{f"lr-{r}": {"lr_ref": repr(TrainConfig.lr_ref * float(r) / 0.3)} for r in ("0.3", "0.5", "1.0")},
    "size-64": {"model.in_size": "64"},
    "size-96": {"model.in_size": "96"},
}


def _defaults() -> dict:
    return config_to_dict(TrainConfig())


def _field_kinds() -> dict[str, object]:
    """Default value (or enum type) per flat key; drives value parsing."""
    cfg = TrainConfig()
    kinds = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in ("model", "loss", "aug"):
            for sf in fields(v):
                sv = getattr(v, sf.name)
                kinds[f"{f.name}.{sf.name}"] = type(sv) if isinstance(sv, enum.Enum) else sv
        else:
            kinds[f.name] = v
    return kinds


def _parse_bool(key, text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def parse_value(key: str, text: str):
    """Convert the text of one value to the type of ``key``'s field."""
    kinds = _field_kinds()
    if key not in kinds:
        raise ConfigError(f"unknown config key {key!r}")
    kind = kinds[key]
    text = text.strip()
    try:
        if isinstance(kind, type) and issubclass(kind, enum.Enum):
            return kind(text).value
        if isinstance(kind, bool):
            return _parse_bool(key, text)
        if isinstance(kind, int):
            return int(text)
        if isinstance(kind, float):
            return float(text)
        if isinstance(kind, str):
            return text
        if kind is None or isinstance(kind, tuple):
            if kind is None and text.lower() in ("", "none"):
                return None
            if text.startswith("["):
                return json.loads(text)
            return [float(p) if any(c in p for c in ".eE") else int(p)
                    for p in (s.strip() for s in text.split(",")) if p]
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    raise ConfigError(f"{key}: unsupported value type")


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines -> raw string mapping (later lines win)."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _field_kinds():
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = value
    return out


def read_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text, str(path))


def parse_set(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in _field_kinds():
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out


def resolve(presets: Iterable[str] = (), path=None, overrides: Mapping[str, str] | None = None,
            **direct) -> TrainConfig:
    """Defaults < presets (in order) < file < ``overrides`` < ``direct``.

    ``direct`` takes already-typed values for flat keys (the CLI's
    ``--steps`` and friends).
    """
    values = _defaults()
    layers = []
    for name in presets:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        layers.append(PRESETS[name])
    if path is not None:
        layers.append(read_file(path))
    if overrides:
        layers.append(dict(overrides))
    for layer in layers:
        for key, text in layer.items():
            values[key] = parse_value(key, text)
    for key, v in direct.items():
        if v is not None:
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = v
    return config_from_dict(values)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        if any(isinstance(x, (list, tuple)) for x in v):
            return json.dumps(v)
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump(config: TrainConfig) -> str:
    """The fully resolved config in file syntax; ``resolve(path=...)`` reads it back."""
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in sorted(config_to_dict(config).items()))
