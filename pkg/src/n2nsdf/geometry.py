"""Point clouds, normalization, exact k-nearest neighbours, local regions and query sampling."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

PROVENANCE = ("clean", "noisy", "denoised")
QUERY_SCALE_NEIGHBOR = 51
SCALE_FLOOR = 1e-6


@dataclass
class PointCloud:
    points: np.ndarray
    tag: str = "clean"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.tag not in PROVENANCE:
            raise ValueError(f"unknown provenance tag {self.tag!r}")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)

    def longest_edge(self) -> float:
        lo, hi = self.bbox()
        return float(np.max(hi - lo))


@dataclass(frozen=True)
class AffineTransform:
    """Maps original coordinates ``x`` to ``(x - center) * scale``."""

    center: tuple[float, float, float]
    scale: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - np.asarray(self.center)) * self.scale

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) / self.scale + np.asarray(self.center)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineTransform":
        return cls(tuple(float(c) for c in d["center"]), float(d["scale"]))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls((0.0, 0.0, 0.0), 1.0)


def normalize_to_unit(pc: PointCloud) -> tuple[PointCloud, AffineTransform]:
    """Center the bounding box at the origin and scale its longest edge to 1."""
    if len(pc) == 0:
        raise ValueError("cannot normalize an empty point cloud")
    lo, hi = pc.bbox()
    extent = float(np.max(hi - lo))
    if extent <= 0.0:
        raise ValueError("degenerate point cloud: all points coincide")
    tf = AffineTransform(tuple(float(c) for c in (lo + hi) / 2.0), 1.0 / extent)
    return PointCloud(tf.apply(pc.points), pc.tag), tf


class KnnIndex:
    """Balanced kd-tree with deterministic (distance, index) ordering of results."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self.tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    @classmethod
    def from_cloud(cls, pc: PointCloud) -> "KnnIndex":
        return cls(pc.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, q, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the ``k`` nearest points, ascending, ties by index."""
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k must lie in [1, {n}], got {k}")
        q = np.asarray(q, dtype=np.float64).reshape(3)
        d, _ = self.tree.query(q, k=k)
        radius = float(np.max(d))
        # every point tied with the k-th distance must compete for the last slots
        cand = np.asarray(
            self.tree.query_ball_point(q, radius * (1.0 + 1e-9) + 1e-300), dtype=np.int64
        )
        dist = _euclid(self.points[cand], q)
        order = np.lexsort((cand, dist))[:k]
        return cand[order], dist[order]

    def knn(self, q, k: int) -> list[tuple[int, float]]:
        idx, dist = self.query(q, k)
        return [(int(i), float(d)) for i, d in zip(idx, dist)]

    def within(self, q, radius: float) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).reshape(3)
        idx = np.asarray(self.tree.query_ball_point(q, radius), dtype=np.int64)
        return np.sort(idx)

    @cached_property
    def query_scales(self) -> np.ndarray:
        """Per-point distance to its 51st nearest neighbour (self counted first).

        Clouds with fewer points fall back to the farthest available neighbour.
        """
        k = min(QUERY_SCALE_NEIGHBOR, len(self.points))
        d, _ = self.tree.query(self.points, k=k)
        d = np.asarray(d).reshape(len(self.points), k)
        return np.maximum(d[:, -1], SCALE_FLOOR)


def _euclid(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = p - q
    return np.sqrt(np.sum(diff * diff, axis=1))


@dataclass
class LocalRegion:
    center: int
    members: np.ndarray
    scales: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.members)


def region_around(pc: PointCloud, index: KnnIndex, center: int, K: int) -> LocalRegion:
    members, _ = index.query(pc.points[center], K)
    return LocalRegion(int(center), members, index.query_scales[members])


def sample_local_region(
    pc: PointCloud, index: KnnIndex, K: int, rng: np.random.Generator
) -> LocalRegion:
    """Random center, its ``K`` nearest points (itself included) and their query scales."""
    if K > len(pc):
        raise ValueError(f"region size K={K} exceeds point count {len(pc)}")
    center = int(rng.integers(len(pc)))
    return region_around(pc, index, center, K)


def sample_queries(
    region: LocalRegion, pc: PointCloud, U: int, rng: np.random.Generator
) -> np.ndarray:
    """``U`` isotropic Gaussian samples, each around a uniformly picked region member."""
    if U < 1:
        raise ValueError("U must be at least 1")
    pick = rng.integers(len(region.members), size=U)
    base = pc.points[region.members[pick]]
    return base + rng.standard_normal((U, 3)) * region.scales[pick][:, None]


def add_noise(
    pc: PointCloud,
    sigma: float,
    rng: np.random.Generator,
    kind: Literal["gaussian", "uniform"] = "gaussian",
) -> PointCloud:
    """I.i.d. per-axis perturbation with standard deviation ``sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return PointCloud(pc.points.copy(), "noisy")
    if kind == "gaussian":
        offset = rng.standard_normal(pc.points.shape) * sigma
    elif kind == "uniform":
        half = sigma * np.sqrt(3.0)
        offset = rng.uniform(-half, half, size=pc.points.shape)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return PointCloud(pc.points + offset, "noisy")


SPLIT_STRATEGIES = ("sphere-knn", "sphere-fixed", "voxel")


@dataclass
class SplitParams:
    K: int = 1000
    radius: float = 0.1
    grid: int = 8
    max_retries: int = 100


def split_strategy(
    pc: PointCloud,
    index: KnnIndex,
    strategy: str,
    params: SplitParams,
    rng: np.random.Generator,
) -> LocalRegion:
    if strategy == "sphere-knn":
        if params.K < 1:
            raise ValueError("K must be at least 1")
        return sample_local_region(pc, index, params.K, rng)
    if strategy == "sphere-fixed":
        if params.radius <= 0:
            raise ValueError("radius must be positive")
        center = int(rng.integers(len(pc)))
        members = index.within(pc.points[center], params.radius)
        return LocalRegion(center, members, index.query_scales[members])
    if strategy == "voxel":
        if params.grid < 1:
            raise ValueError("voxel grid count must be at least 1")
        cells = voxel_cells(pc, params.grid)
        g = params.grid
        for _ in range(params.max_retries):
            cell = int(rng.integers(g**3))
            members = np.flatnonzero(cells == cell)
            if len(members):
                return LocalRegion(int(members[0]), members, index.query_scales[members])
        raise RuntimeError(
            f"no non-empty voxel found after {params.max_retries} draws on a {g}^3 grid"
        )
    raise ValueError(f"unknown splitting strategy {strategy!r}; expected one of {SPLIT_STRATEGIES}")


def voxel_cells(pc: PointCloud, grid: int) -> np.ndarray:
    """Linear cell id per point on a ``grid``^3 partition of the cloud's bounding box."""
    lo, hi = pc.bbox()
    extent = np.where(hi > lo, hi - lo, 1.0)
    ijk = np.floor((pc.points - lo) / extent * grid).astype(np.int64)
    ijk = np.clip(ijk, 0, grid - 1)
    return (ijk[:, 0] * grid + ijk[:, 1]) * grid + ijk[:, 2]


# ---------------------------------------------------------------------------
# file I/O


@dataclass(frozen=True)
class CloudFormat:
    kind: Literal["xyz", "ply"]
    dtype: str = "<f8"


def read_point_cloud(path: str | os.PathLike, tag: str = "noisy") -> tuple[PointCloud, CloudFormat]:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head.startswith(b"ply"):
        pts, dtype = _read_ply_vertices(path)
        fmt = CloudFormat("ply", dtype)
    else:
        with open(path, "r", encoding="ascii") as fh:
            rows = [line.split() for line in fh if line.strip() and not line.startswith("#")]
        if rows and any(len(r) < 3 for r in rows):
            raise ValueError(f"{path}: every XYZ line needs three coordinates")
        pts = np.array([[float(v) for v in r[:3]] for r in rows], dtype=np.float64).reshape(-1, 3)
        fmt = CloudFormat("xyz")
    if len(pts) == 0:
        raise ValueError(f"{path}: point cloud is empty")
    return PointCloud(pts, tag), fmt


def write_point_cloud(path: str | os.PathLike, pc: PointCloud, fmt: CloudFormat | None = None) -> None:
    path = os.fspath(path)
    fmt = fmt or CloudFormat("ply" if path.endswith(".ply") else "xyz")
    if fmt.kind == "xyz":
        with open(path, "w", encoding="ascii") as fh:
            for x, y, z in pc.points.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n")
        return
    typ = {"<f4": "float", "<f8": "double"}[fmt.dtype]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pc)}\n"
        f"property {typ} x\nproperty {typ} y\nproperty {typ} z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(pc.points, dtype=fmt.dtype).tobytes())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def parse_ply_header(fh) -> list[tuple[str, int, list[tuple[str, str, str | None]]]]:
    """Return ``[(element, count, [(name, dtype, list_count_dtype|None), ...]), ...]``."""
    if fh.readline().strip() != b"ply":
        raise ValueError("not a PLY file")
    elements: list = []
    fmt = None
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("PLY header not terminated")
        tok = line.decode("ascii").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], _PLY_TYPES[tok[3]], _PLY_TYPES[tok[2]]))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]], None))
        elif tok[0] == "end_header":
            break
    if fmt != "binary_little_endian":
        raise ValueError(f"only binary_little_endian PLY is supported, got {fmt}")
    return elements


def _read_ply_vertices(path: str) -> tuple[np.ndarray, str]:
    with open(path, "rb") as fh:
        elements = parse_ply_header(fh)
        if not elements or elements[0][0] != "vertex":
            raise ValueError(f"{path}: first PLY element must be 'vertex'")
        _, count, props = elements[0]
        if any(p[2] is not None for p in props):
            raise ValueError(f"{path}: list properties on vertices are not supported")
        dt = np.dtype([(name, typ) for name, typ, _ in props])
        data = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt, count=count)
    pts = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    x_type = next(typ for name, typ, _ in props if name == "x")
    return pts, x_type
