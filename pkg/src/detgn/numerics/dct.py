"""Orthonormal DCT-II and its inverse along the last axis."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def dct_matrix(n: int) -> np.ndarray:
    """Row k holds the k-th orthonormal DCT-II basis vector of length n."""
    if n < 1:
        raise ValueError("DCT length must be at least 1")
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * t + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("cannot transform an empty signal")
    return x @ dct_matrix(x.shape[-1]).T


def idct(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.size == 0 or c.shape[-1] == 0:
        raise ValueError("cannot transform an empty signal")
    return c @ dct_matrix(c.shape[-1])
