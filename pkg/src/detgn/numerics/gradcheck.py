"""Central finite-difference check of taped gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from detgn.numerics.autodiff import Tape, grad


def gradient_check(
    fn: Callable[[Mapping[str, object]], object],
    arrays: Mapping[str, np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-7,
    noise_floor: bool = True,
) -> float:
    """Largest entrywise relative error between reverse-mode and central differences.

    ``fn`` maps a dict of inputs (arrays or Vars) to a scalar. The relative
    error of one entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries whose true derivative vanishes from dividing noise by zero.

    With ``noise_floor`` the floor is raised to the finite-difference
    resolution: two evaluations of f carrying ~100 ulps of rounding each
    resolve derivatives only to about ``100 u |f| / h``, and a 1e-4 relative
    comparison needs entries 1e4 times larger than that.
    """
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in arrays.items()}
    out = fn(leaves)
    analytic = dict(zip(leaves, grad(tape, out, list(leaves.values()))))
    if noise_floor:
        scale = max(1.0, abs(float(out.value)))
        floor = max(floor, 1e6 * np.finfo(np.float64).eps * scale / h)

    worst = 0.0
    for name, base in arrays.items():
        base = np.asarray(base, dtype=np.float64)
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            probe = dict(arrays)
            up = base.copy().reshape(-1)
            dn = base.copy().reshape(-1)
            up[i] += h
            dn[i] -= h
            probe[name] = up.reshape(base.shape)
            f_up = float(np.asarray(fn(probe)))
            probe[name] = dn.reshape(base.shape)
            f_dn = float(np.asarray(fn(probe)))
            flat[i] = (f_up - f_dn) / (2.0 * h)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
