"""TOML run configuration: loading, dotted overrides, hashing, echo."""

from __future__ import annotations

import copy
import hashlib
import sys
from pathlib import Path
from typing import Iterable

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .model import ModelSpec, spec_from_dict

DEFAULTS = {
    "seed": 0,
    "solver": {"h": 0.005, "dt": 0.001, "boundary": "images", "mode": "continue",
               "tol": 1e-12, "jump_ratio": 50.0, "jump_mass": 0.05, "snapshot_times": []},
    "particles": {"n": 2000, "dt": 0.001, "bridge": True, "assignment": "iid",
                  "budget": 2e10},
}


def load_config(path) -> tuple[dict, bytes]:
    """Parse a config file; returns (dict with defaults filled, raw bytes)."""
    raw = Path(path).read_bytes()
    data = tomllib.loads(raw.decode("utf-8"))
    if "model" not in data:
        raise ValueError(f"{path}: missing [model] table")
    return merge_defaults(data), raw


def merge_defaults(data: dict) -> dict:
    out = copy.deepcopy(DEFAULTS)
    for key, val in data.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = {**out[key], **val}
        else:
            out[key] = val
    return out


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    """Apply ``a.b.c=value`` strings in order; integer segments index arrays."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = _parse_value(text.strip())
        else:
            node[last] = _parse_value(text.strip())
    return cfg


def config_hash(raw: bytes, overrides: Iterable[str] = ()) -> str:
    h = hashlib.sha256(raw)
    for o in overrides:
        h.update(b"\0" + o.encode("utf-8"))
    return h.hexdigest()[:12]


def spec_from_config(cfg: dict) -> ModelSpec:
    return spec_from_dict(cfg["model"])


def dumps(cfg: dict) -> str:
    return tomli_w.dumps(_clean(cfg))


def _clean(obj):
    # TOML has no null; drop None entries
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj
