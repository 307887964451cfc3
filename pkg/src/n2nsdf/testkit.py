"""Independent oracles used by the test and acceptance suites.

Nothing here calls into the module it is meant to check: EMD is brute-forced
over permutations, gradients come from central differences, nearest neighbours
from a full distance scan, and surfaces from closed-form signed distances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

FD_STEP = 1e-5
MAX_BRUTE_EMD = 7


@dataclass(frozen=True)
class Oracle:
    kind: str
    tolerance: float


ORACLES = {
    "analytic-sdf": Oracle("analytic-sdf", 1e-12),
    "factorial-emd": Oracle("factorial-emd", 1e-12),
    "finite-diff": Oracle("finite-diff", 1e-4),
    "knn-scan": Oracle("knn-scan", 0.0),
    "stat-moment": Oracle("stat-moment", 0.05),
}


def brute_force_emd(A, B, ground: str = "sqeuclidean") -> float:
    """Minimum total matching cost over every permutation; sizes up to 7."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if len(A) != len(B):
        raise ValueError("sets must have equal size")
    n = len(A)
    if n > MAX_BRUTE_EMD:
        raise ValueError(f"brute force EMD limited to {MAX_BRUTE_EMD} points, got {n}")
    if n == 0:
        raise ValueError("empty sets")
    cost = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            sq = sum((float(a) - float(b)) ** 2 for a, b in zip(A[i], B[j]))
            cost[i][j] = sq if ground == "sqeuclidean" else math.sqrt(sq)
    return min(
        math.fsum(cost[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n))
    )


def finite_diff_gradient(fn: Callable[[np.ndarray], float], x, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function; works on any array shape."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(fn(x))
        flat[i] = old - h
        down = float(fn(x))
        flat[i] = old
        g[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def knn_scan(points, q, k: int) -> list[tuple[int, float]]:
    """k nearest points by exhaustive scan; ties go to the lower index."""
    points = np.asarray(points, dtype=float)
    q = np.asarray(q, dtype=float)
    d = [math.sqrt(sum((float(p[j]) - float(q[j])) ** 2 for j in range(3))) for p in points]
    order = sorted(range(len(points)), key=lambda i: (d[i], i))
    return [(i, d[i]) for i in order[:k]]


def brute_chamfer(A, B, order: str = "L1") -> float:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    D = np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1))
    if order == "L2":
        D = D**2
    return float((D.min(axis=1).mean() + D.min(axis=0).mean()) / 2.0)


def moment_check(samples, mean: float, std: float, n_sigma: float = 5.0) -> bool:
    """Whether the sample mean and std agree with the target within ``n_sigma`` standard errors."""
    x = np.asarray(samples, dtype=float).ravel()
    n = len(x)
    se_mean = std / math.sqrt(n)
    se_std = std / math.sqrt(2.0 * (n - 1))
    return abs(x.mean() - mean) <= n_sigma * se_mean and abs(x.std(ddof=1) - std) <= n_sigma * se_std


# closed-form signed distances


def sphere_sdf(p, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.linalg.norm(p - np.asarray(center), axis=-1) - radius


def sphere_gradient(p, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    d = np.asarray(p, dtype=float) - np.asarray(center)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def box_sdf(p, half) -> np.ndarray:
    q = np.abs(np.asarray(p, dtype=float)) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def sphere_points(n: int, radius: float, rng: np.random.Generator, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Uniform samples on a sphere surface."""
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v
