"""Exact Earth Mover's Distance between equal-size point sets.

The optimal one-to-one matching is solved on plain values with a shortest
augmenting path assignment solver; the loss is then rebuilt on the tape with the
matching held fixed, so its gradient w.r.t. each source point ``a_i`` is the
per-pair gradient ``2 (a_i - b_pi(i)) / n`` (squared ground cost).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad

DEFAULT_CAP = 2048
GROUND_COSTS = ("sqeuclidean", "euclidean")


@dataclass
class Matching:
    permutation: np.ndarray  # permutation[i] = target index matched to source i
    total_cost: float
    pair_costs: np.ndarray

    @property
    def n(self) -> int:
        return len(self.permutation)

    @property
    def cost(self) -> float:
        """Mean per-pair cost."""
        return self.total_cost / self.n

    def to_json(self) -> str:
        return json.dumps(
            [
                {"source": i, "target": int(j), "cost": float(c)}
                for i, (j, c) in enumerate(zip(self.permutation, self.pair_costs))
            ]
        )

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def _check_sets(A: np.ndarray, B: np.ndarray, cap: int) -> None:
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"point sets must be (n, d) arrays, got {A.shape} and {B.shape}")
    if len(A) != len(B):
        raise ValueError(f"EMD needs equal-size sets, got {len(A)} and {len(B)}")
    if len(A) == 0:
        raise ValueError("EMD of empty sets is undefined")
    if len(A) > cap:
        raise ValueError(
            f"set size {len(A)} exceeds the solver cap of {cap}; reduce the batch (U) size"
        )


def cost_matrix(A: np.ndarray, B: np.ndarray, ground: str = "sqeuclidean") -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    if ground == "sqeuclidean":
        return sq
    if ground == "euclidean":
        return np.sqrt(sq)
    raise ValueError(f"unknown ground cost {ground!r}; expected one of {GROUND_COSTS}")


def exact_emd(A, B, ground: str = "sqeuclidean", cap: int = DEFAULT_CAP) -> Matching:
    """Minimum-cost perfect matching from ``A`` onto ``B``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _check_sets(A, B, cap)
    C = cost_matrix(A, B, ground)
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(len(A), dtype=np.int64)
    perm[rows] = cols
    pair = C[np.arange(len(A)), perm]
    return Matching(perm, float(np.sum(pair)), pair)


def emd_loss(A: ad.Var, B, ground: str = "sqeuclidean", cap: int = DEFAULT_CAP) -> tuple[ad.Var, Matching]:
    """Mean matched cost between tape points ``A`` and fixed points ``B``.

    The matching is solved on ``A``'s current values and treated as constant.
    """
    B = np.asarray(B, dtype=np.float64)
    match = exact_emd(A.value, B, ground, cap)
    diff = ad.sub(A, B[match.permutation])
    if ground == "sqeuclidean":
        per_pair = ad.sum(ad.square(diff), axis=1)
    else:
        per_pair = ad.norm(diff, axis=1)
    return ad.mul(ad.sum(per_pair), 1.0 / match.n), match
