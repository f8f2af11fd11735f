"""Config file parsing: UTF-8 INI sections with typed values, dotted-key
command-line overrides, and the named presets.

Value coercion: "true"/"false" -> bool, "none" -> None, integers and floats
by syntax, comma-separated values -> tuple, anything else -> string.
Override precedence is CLI > file > defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import fields

from .synthscenes import GeneratorConfig
from .trainer import TrainConfig

# fields that must stay tuples even when a single value is given
_TUPLE_FIELDS = {
    "language_subset", "shots_per_title", "duration_range", "scale_range",
    "crop", "variants", "tasks", "seeds",
}


def parse_value(raw):
    raw = raw.strip()
    if "," in raw:
        items = [parse_value(part) for part in raw.split(",") if part.strip()]
        return tuple(items)
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def _normalize(key, value):
    if key in _TUPLE_FIELDS and value is not None and not isinstance(value, tuple):
        return (value,)
    return value


def load_config(path):
    """Nested dict: {section: {key: typed value}}; dotted section names nest
    one level (e.g. [variant.A1] -> cfg["variant"]["A1"])."""
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    out = {}
    for section in parser.sections():
        values = {k: _normalize(k, parse_value(v)) for k, v in parser.items(section)}
        if "." in section:
            head, tail = section.split(".", 1)
            out.setdefault(head, {})[tail] = values
        else:
            out[section] = values
    return out


def apply_overrides(cfg, overrides):
    """Apply "section.key=value" strings (deepest dot splits the key)."""
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) < 2:
            raise ValueError(f"override key {dotted!r} needs a section prefix")
        node = cfg
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _normalize(parts[-1], parse_value(raw))
    return cfg


def _filtered_kwargs(cls, section):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    return dict(section)


def generator_config(cfg):
    section = cfg.get("generator", {})
    return GeneratorConfig(**_filtered_kwargs(GeneratorConfig, section))


def train_config(cfg, variant_id=None, extra=None):
    """TrainConfig from [train] defaults merged with one [variant.<id>]."""
    merged = dict(cfg.get("train", {}))
    if variant_id is not None:
        variants = cfg.get("variant", {})
        if variant_id not in variants:
            raise ValueError(f"no [variant.{variant_id}] section in config")
        merged.update(variants[variant_id])
        merged.setdefault("variant_id", variant_id)
    if extra:
        merged.update(extra)
    return TrainConfig(**_filtered_kwargs(TrainConfig, merged))


def suite_configs(cfg):
    """All [variant.*] sections merged over [train], in file order."""
    variants = cfg.get("variant", {})
    if not variants:
        return []
    return [train_config(cfg, variant_id) for variant_id in variants]
