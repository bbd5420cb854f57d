"""Flat key=value config files with typed dataclass binding.

Format: one ``key = value`` per line, ``#`` comments, no sections.  Dotted
prefixes namespace the consumers (``encoder.layers``, ``pretrain.lr``).
Every CLI run writes its fully-resolved flat config back into the output
directory so the run can be replayed from that snapshot alone.
"""

from __future__ import annotations

import dataclasses
import types
import typing


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        out[key] = value.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())


def format_config(flat: dict) -> str:
    return "".join(f"{k} = {flat[k]}\n" for k in sorted(flat))


def write_config(flat: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_config(flat))


def apply_overrides(flat: dict, overrides) -> dict:
    """key=value strings (CLI --set) layered over the file values."""
    out = dict(flat)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _convert(text: str, annotation):
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _convert(text, args[0])
    if annotation is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got {text!r}")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    if annotation is str:
        return text
    raise ValueError(f"unsupported config field type {annotation}")


def dataclass_from_flat(cls, flat: dict, prefix: str):
    """Instantiate a dataclass from prefixed flat keys; unknown keys under the
    prefix are an error so typos fail loudly."""
    hints = typing.get_type_hints(cls)
    field_names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in flat.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in field_names:
            raise ValueError(f"unknown config key {key!r} (no field {name!r} in "
                             f"{cls.__name__})")
        kwargs[name] = _convert(value, hints[name])
    return cls(**kwargs)


def dataclass_to_flat(obj, prefix: str) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        out[f"{prefix}{f.name}"] = "none" if value is None else str(value)
    return out
