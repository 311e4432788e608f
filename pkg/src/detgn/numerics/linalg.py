"""Eigendecomposition of small symmetric matrices (n = 2 or 3)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

JACOBI_MAX_SWEEPS = 30
JACOBI_TOL = 1e-14


@dataclass(frozen=True)
class SymEig:
    """Eigenvalues in descending order and the matching orthonormal column frame."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _eig2(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p, q, r = a[0, 0], a[0, 1], a[1, 1]
    half_tr = 0.5 * (p + r)
    rad = math.hypot(0.5 * (p - r), q)
    vals = np.array([half_tr + rad, half_tr - rad])
    if q == 0.0:
        vecs = np.eye(2) if p >= r else np.array([[0.0, 1.0], [1.0, 0.0]])
        return vals, vecs
    # (q, lam - p) and (lam - r, q) are both eigenvectors; pick the better conditioned one
    lam = vals[0]
    u1 = np.array([q, lam - p])
    u2 = np.array([lam - r, q])
    u = u1 if np.dot(u1, u1) >= np.dot(u2, u2) else u2
    u = u / np.linalg.norm(u)
    vecs = np.column_stack([u, [-u[1], u[0]]])
    return vals, vecs


def _jacobi(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(JACOBI_MAX_SWEEPS):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(i + 1, n)))
        if off <= JACOBI_TOL * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
                v = v @ rot
    return np.diag(a).copy(), v


def sym_eig(a) -> SymEig:
    """Eigendecomposition of a symmetric 2x2 or 3x3 matrix.

    The input is symmetrized first. Eigenvalues come back descending and each
    eigenvector has its first nonzero component positive.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape not in ((2, 2), (3, 3)):
        raise ValueError(f"expected a 2x2 or 3x3 matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    a = 0.5 * (a + a.T)
    vals, vecs = _eig2(a) if a.shape[0] == 2 else _jacobi(a)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    for k in range(vecs.shape[1]):
        col = vecs[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-15)
        if nz.size and col[nz[0]] < 0:
            vecs[:, k] = -col
    return SymEig(vals, vecs)
