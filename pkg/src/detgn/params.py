"""Flattening of nested parameter dataclasses into named arrays and back.

Fields marked ``static`` (dilations, dropout rates, fixed adjacency) are carried
along structurally but never exposed as trainable arrays.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable

import numpy as np

from detgn.numerics import RngStream


def static(default=dataclasses.MISSING):
    return dataclasses.field(default=default, metadata={"static": True})


def flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        if f.metadata.get("static"):
            continue
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if v is None:
            continue
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            for i, item in enumerate(v):
                out.update(flatten(item, f"{key}.{i}."))
        else:
            out[key] = v
    return out


def rebuild(obj, arrays: dict, prefix: str = ""):
    """Copy of ``obj`` with every trainable field taken from ``arrays``."""
    changes = {}
    for f in dataclasses.fields(obj):
        if f.metadata.get("static"):
            continue
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if v is None:
            continue
        if dataclasses.is_dataclass(v):
            changes[f.name] = rebuild(v, arrays, key + ".")
        elif isinstance(v, (list, tuple)):
            changes[f.name] = type(v)(
                rebuild(item, arrays, f"{key}.{i}.") for i, item in enumerate(v)
            )
        else:
            changes[f.name] = arrays[key]
    return dataclasses.replace(obj, **changes)


def map_arrays(obj, fn: Callable):
    return rebuild(obj, {k: fn(v) for k, v in flatten(obj).items()})


def glorot(rng: RngStream, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def dropout_mask(rng: RngStream, shape, rate: float) -> np.ndarray:
    """Inverted-scaling keep mask: entries are 0 or 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


MODES = ("train", "eval", "mc")


def check_mode(mode: str, rng) -> bool:
    """True when dropout is active for ``mode``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    stochastic = mode != "eval"
    if stochastic and rng is None:
        raise ValueError(f"mode {mode!r} needs a random stream for dropout")
    return stochastic
