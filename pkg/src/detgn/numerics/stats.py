"""Chi-square critical values and sample covariance."""

from __future__ import annotations

import math

import numpy as np

_EPS = 1e-16
_TINY = 1e-300


def _gamma_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_contfrac(a: float, x: float) -> float:
    # modified Lentz evaluation of the upper-tail continued fraction
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValueError("shape must be positive")
    if x <= 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_contfrac(a, x)


def chi2_cdf(q: float, dof: int) -> float:
    return gammainc_lower(0.5 * dof, 0.5 * q)


def chi2_quantile(dof: int, alpha: float) -> float:
    """Critical value q with P(X > q) = alpha for X ~ chi-square(dof)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if dof < 1:
        raise ValueError("degrees of freedom must be a positive integer")
    target = 1.0 - alpha
    lo, hi = 0.0, dof + 40.0
    while chi2_cdf(hi, dof) < target:
        lo, hi = hi, 2.0 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def sample_covariance(points, unbiased: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Covariance matrix and mean of an (S, n) point cloud."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("points must be an (S, n) matrix")
    s = p.shape[0]
    if unbiased and s < 2:
        raise ValueError("unbiased covariance needs at least two points")
    if s < 1:
        raise ValueError("no points")
    m = p.mean(axis=0)
    d = p - m
    cov = d.T @ d / (s - 1 if unbiased else s)
    return 0.5 * (cov + cov.T), m
