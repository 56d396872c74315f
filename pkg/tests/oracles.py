"""Independent oracles used across the test suite.

Everything here is deliberately written against plain numpy, never
against the library's backward pass or production attention path, so a
test comparing the two is a genuine cross-check.
"""

from __future__ import annotations

import numpy as np


def central_difference(f, arrays: list[np.ndarray], h: float = 1e-5
                       ) -> list[np.ndarray]:
    """Gradient of scalar f(*arrays) by central differences, per array.

    Arrays must be float64; f is only ever evaluated forward.
    """
    grads = []
    for idx, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(*arrays)
            flat[i] = orig - h
            down = f(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error between two gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    d_prime: int) -> np.ndarray:
    """Brute-force scaled-dot-product attention in float64."""
    q = q.astype(np.float64)
    k = k.astype(np.float64)
    v = v.astype(np.float64)
    scores = q @ k.T / np.sqrt(float(d_prime))
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


def sum_of_squares(x: np.ndarray) -> float:
    """Brute-force elementwise accumulation, no vectorized norm."""
    total = 0.0
    for value in np.asarray(x, dtype=np.float64).reshape(-1):
        total += float(value) * float(value)
    return total


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(((a.astype(np.float64) - b.astype(np.float64)) ** 2).mean())
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def matrix_rank(x: np.ndarray, tol: float = 1e-6) -> int:
    s = np.linalg.svd(np.asarray(x, dtype=np.float64), compute_uv=False)
    return int((s > tol * s.max()).sum()) if s.size else 0
