"""Reconstruction metrics: L1/L2 Chamfer distance, normal consistency and F-score."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesher import TriangleMesh

DEFAULT_TAU = 0.01
NORMAL_TOL = 1e-6


@dataclass
class MetricReport:
    cd_l1: float | None
    cd_l2: float | None
    nc: float | None
    f_score: float | None
    n_samples_recon: int
    n_samples_gt: int
    tau: float = DEFAULT_TAU
    empty_reconstruction: bool = False
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")


REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "cd_l1", "cd_l2", "nc", "f_score", "n_samples_recon", "n_samples_gt",
        "tau", "empty_reconstruction", "config",
    ],
    "properties": {
        "cd_l1": {"type": ["number", "null"], "minimum": 0},
        "cd_l2": {"type": ["number", "null"], "minimum": 0},
        "nc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "f_score": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "n_samples_recon": {"type": "integer", "minimum": 0},
        "n_samples_gt": {"type": "integer", "minimum": 0},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "empty_reconstruction": {"type": "boolean"},
        "config": {"type": "object"},
    },
    "additionalProperties": False,
}


def sample_mesh(
    mesh: TriangleMesh, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform surface samples and their face normals."""
    if mesh.is_empty():
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[face]]
    pts = np.einsum("nk,nkd->nd", w, tri)
    return pts, mesh.face_normals[face]


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise ValueError("metric inputs must be non-empty")
    return x


def _nn(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d, i = cKDTree(dst).query(src, k=1)
    return np.asarray(d), np.asarray(i)


def chamfer(A, B, order: str = "L1") -> float:
    """Symmetric mean nearest-neighbour distance, halved.

    ``L1`` averages Euclidean distances, ``L2`` squared Euclidean distances.
    """
    A, B = _as_points(A), _as_points(B)
    dab, _ = _nn(A, B)
    dba, _ = _nn(B, A)
    if order == "L1":
        return float((dab.mean() + dba.mean()) / 2.0)
    if order == "L2":
        return float((np.mean(dab**2) + np.mean(dba**2)) / 2.0)
    raise ValueError(f"unknown chamfer order {order!r}")


def normal_consistency(A: tuple, B: tuple) -> float:
    """Mean |cos| between normals of nearest-neighbour pairs, symmetrized."""
    pa, na = _as_points(A[0]), _as_points(A[1])
    pb, nb = _as_points(B[0]), _as_points(B[1])
    for n in (na, nb):
        if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > NORMAL_TOL):
            raise ValueError("normals must be unit length")
    _, iab = _nn(pa, pb)
    _, iba = _nn(pb, pa)
    ab = np.abs(np.sum(na * nb[iab], axis=1))
    ba = np.abs(np.sum(nb * na[iba], axis=1))
    return float((ab.mean() + ba.mean()) / 2.0)


def f_score(A, B, tau: float = DEFAULT_TAU) -> float:
    """Harmonic mean of precision (A near B) and recall (B near A) at distance ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    A, B = _as_points(A), _as_points(B)
    precision, recall = precision_recall(A, B, tau)
    if precision + recall == 0:
        return 0.0
    return float(2.0 * precision * recall / (precision + recall))


def precision_recall(A, B, tau: float) -> tuple[float, float]:
    dab, _ = _nn(_as_points(A), _as_points(B))
    dba, _ = _nn(_as_points(B), _as_points(A))
    return float(np.mean(dab <= tau)), float(np.mean(dba <= tau))


def evaluate_samples(
    recon: tuple[np.ndarray, np.ndarray],
    gt: tuple[np.ndarray, np.ndarray],
    tau: float = DEFAULT_TAU,
    config: dict | None = None,
) -> MetricReport:
    return MetricReport(
        cd_l1=chamfer(recon[0], gt[0], "L1"),
        cd_l2=chamfer(recon[0], gt[0], "L2"),
        nc=normal_consistency(recon, gt),
        f_score=f_score(recon[0], gt[0], tau),
        n_samples_recon=len(recon[0]),
        n_samples_gt=len(gt[0]),
        tau=tau,
        config=dict(config or {}),
    )


def evaluate_mesh(
    recon: TriangleMesh,
    gt: tuple[np.ndarray, np.ndarray],
    n_samples: int,
    rng: np.random.Generator,
    tau: float = DEFAULT_TAU,
    config: dict | None = None,
) -> MetricReport:
    """Sample ``recon`` and score it against ground-truth samples ``(points, normals)``."""
    if recon.is_empty():
        return MetricReport(
            None, None, None, None, 0, len(gt[0]), tau, empty_reconstruction=True,
            config=dict(config or {}),
        )
    return evaluate_samples(sample_mesh(recon, n_samples, rng), gt, tau, config)
