"""Zero-level-set extraction by marching cubes, and OBJ/PLY mesh I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .geometry import parse_ply_header
from .sdf_net import SdfNetwork, evaluate

DEFAULT_BOUNDS = ((-0.525, -0.525, -0.525), (0.525, 0.525, 0.525))


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross(), axis=1)

    def _cross(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    @property
    def face_normals(self) -> np.ndarray:
        c = self._cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        if np.any(n == 0):
            raise ValueError("mesh has zero-area faces")
        return c / n

    def edge_valence(self) -> dict[tuple[int, int], int]:
        """Number of faces sharing each undirected edge."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return {(int(a), int(b)): int(c) for (a, b), c in zip(uniq, counts)}

    def is_watertight(self) -> bool:
        if self.is_empty():
            return False
        return all(c == 2 for c in self.edge_valence().values())


# ---------------------------------------------------------------------------
# marching cubes


def _tables():
    tri = np.full((256, 15), -1, dtype=np.int64)
    for case, row in enumerate(TRIANGLES):
        tri[case, : len(row)] = row
    corners = np.array(CORNERS, dtype=np.int64)
    edge_start = np.empty((12, 3), dtype=np.int64)
    edge_axis = np.empty(12, dtype=np.int64)
    for e, (a, b) in enumerate(EDGES):
        ca, cb = corners[a], corners[b]
        edge_axis[e] = int(np.flatnonzero(ca != cb)[0])
        edge_start[e] = np.minimum(ca, cb)
    return tri, corners, edge_start, edge_axis


_TRI, _CORNERS, _EDGE_START, _EDGE_AXIS = _tables()


def marching_cubes(
    values: np.ndarray, origin, spacing, iso: float = 0.0
) -> TriangleMesh:
    """Triangulate the ``iso`` level of a lattice of samples.

    ``values[i, j, k]`` is the field at ``origin + (i, j, k) * spacing``.
    Triangles are wound so normals point towards increasing field values.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or min(values.shape) < 2:
        raise ValueError("lattice needs at least 2 samples per axis")
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    nx, ny, nz = values.shape
    below = values < iso

    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for v, (dx, dy, dz) in enumerate(_CORNERS):
        case |= below[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << v
    active = np.argwhere((case != 0) & (case != 255))
    if len(active) == 0:
        return TriangleMesh.empty()

    rows = _TRI[case[active[:, 0], active[:, 1], active[:, 2]]].reshape(-1, 5, 3)
    keep = rows[:, :, 0] >= 0
    cube_of = np.broadcast_to(np.arange(len(active))[:, None], keep.shape)[keep]
    tri_edges = rows[keep]  # (m, 3) local edge numbers

    # global id of a lattice edge: (linear index of its lower node) * 3 + axis
    start = active[cube_of][:, None, :] + _EDGE_START[tri_edges]
    axis = _EDGE_AXIS[tri_edges]
    lin = (start[..., 0] * ny + start[..., 1]) * nz + start[..., 2]
    gid = lin * 3 + axis
    uniq, inverse = np.unique(gid.ravel(), return_inverse=True)
    faces = inverse.reshape(-1, 3)

    node = uniq // 3
    ax = uniq % 3
    i0 = np.stack(np.unravel_index(node, values.shape), axis=1)
    i1 = i0.copy()
    i1[np.arange(len(i1)), ax] += 1
    f0 = values[i0[:, 0], i0[:, 1], i0[:, 2]]
    f1 = values[i1[:, 0], i1[:, 1], i1[:, 2]]
    t = (iso - f0) / (f1 - f0)
    p0 = origin + i0 * spacing
    p1 = origin + i1 * spacing
    verts = p0 + t[:, None] * (p1 - p0)

    # lattice nodes lying exactly on the level set yield coincident vertices
    verts, remap = np.unique(verts, axis=0, return_inverse=True)
    faces = remap.reshape(-1)[faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    mesh = TriangleMesh(verts, faces[:, ::-1])
    if len(mesh.faces):
        area = mesh.face_areas()
        mesh = TriangleMesh(mesh.vertices, mesh.faces[area > 0.0])
    return _drop_unused(mesh)


def _drop_unused(mesh: TriangleMesh) -> TriangleMesh:
    used = np.unique(mesh.faces)
    if len(used) == len(mesh.vertices):
        return mesh
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[mesh.faces])


def lattice(resolution: int, bounds=DEFAULT_BOUNDS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample positions ``(res+1)^3 x 3``, plus origin and spacing."""
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError(f"degenerate bounds {bounds}")
    spacing = (hi - lo) / resolution
    idx = np.arange(resolution + 1)
    gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
    grid = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    return lo + grid * spacing, lo, spacing


def extract_isosurface(
    field: Callable[[np.ndarray], np.ndarray], resolution: int, bounds=DEFAULT_BOUNDS
) -> TriangleMesh:
    pts, lo, spacing = lattice(resolution, bounds)
    vals = np.asarray(field(pts), dtype=np.float64).reshape((resolution + 1,) * 3)
    bad = np.argwhere(~np.isfinite(vals))
    if len(bad):
        raise ValueError(f"non-finite field sample at lattice coordinate {tuple(int(i) for i in bad[0])}")
    return marching_cubes(vals, lo, spacing, 0.0)


def extract_zero_level(
    net: SdfNetwork, code: np.ndarray, resolution: int = 64, bounds=DEFAULT_BOUNDS
) -> TriangleMesh:
    return extract_isosurface(lambda p: evaluate(net, code, p), resolution, bounds)


# ---------------------------------------------------------------------------
# I/O


def write_mesh(mesh: TriangleMesh, path: str | os.PathLike, fmt: str | None = None) -> None:
    path = os.fspath(path)
    fmt = fmt or os.path.splitext(path)[1].lstrip(".").lower()
    if fmt == "obj":
        with open(path, "w", encoding="ascii") as fh:
            for x, y, z in mesh.vertices.tolist():
                fh.write(f"v {x!r} {y!r} {z!r}\n")
            for a, b, c in (mesh.faces + 1).tolist():
                fh.write(f"f {a} {b} {c}\n")
    elif fmt == "ply":
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(mesh.vertices)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            f"element face {len(mesh.faces)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        face_rec = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        face_rec["n"] = 3
        face_rec["idx"] = mesh.faces
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(mesh.vertices.astype("<f4").tobytes())
            fh.write(face_rec.tobytes())
    else:
        raise ValueError(f"unsupported mesh format {fmt!r} for {path}")


def read_mesh(path: str | os.PathLike) -> TriangleMesh:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(3)
    if head == b"ply":
        return _read_ply_mesh(path)
    verts, faces = [], []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(v) for v in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in tok[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _read_ply_mesh(path: str) -> TriangleMesh:
    with open(path, "rb") as fh:
        elements = parse_ply_header(fh)
        verts = np.zeros((0, 3))
        faces = np.zeros((0, 3), dtype=np.int64)
        for name, count, props in elements:
            if name == "vertex":
                dt = np.dtype([(p, t) for p, t, _ in props])
                data = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt, count=count)
                verts = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
            elif name == "face":
                (_, idx_t, cnt_t), = props
                dt = np.dtype([("n", cnt_t), ("idx", idx_t, (3,))])
                data = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt, count=count)
                if count and np.any(data["n"] != 3):
                    raise ValueError(f"{path}: only triangle faces are supported")
                faces = data["idx"].astype(np.int64)
            else:
                raise ValueError(f"{path}: unexpected PLY element {name!r}")
    return TriangleMesh(verts, faces)
