"""Induced operator norms of weight matrices."""

from __future__ import annotations

import math

import numpy as np

from .errors import ArgumentError

POWER_TOL = 1e-10
POWER_MAX_ITERS = 10_000


def operator_norm(w, p) -> float:
    """Induced p-norm of a 2-D matrix.

    p=2: largest singular value via power iteration on W^T W
    (tolerance 1e-10, at most 10000 iterations).  p=inf: max absolute
    row sum.
    """
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    if w.ndim != 2:
        raise ArgumentError(f"operator_norm expects a 2-D matrix, got ndim={w.ndim}")
    if p == 2:
        return _spectral_norm(w)
    if p in (np.inf, math.inf, "inf"):
        return float(np.abs(w).sum(axis=1).max())
    raise ArgumentError(f"unsupported norm order {p!r} (use 2 or inf)")


def _spectral_norm(w: np.ndarray) -> float:
    n = w.shape[1]
    if not np.any(w):
        return 0.0
    gram = w.T @ w
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(POWER_MAX_ITERS):
        u = gram @ v
        norm_u = np.linalg.norm(u)
        if norm_u == 0.0:
            return 0.0
        lam_new = float(v @ u)
        v = u / norm_u
        if abs(lam_new - lam) <= POWER_TOL * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        lam = lam_new
    return math.sqrt(max(lam, 0.0))
