import numpy as np
import pytest

from n2nsdf.mesher import (
    TriangleMesh,
    extract_isosurface,
    extract_zero_level,
    marching_cubes,
    read_mesh,
    write_mesh,
)
from n2nsdf.testkit import sphere_sdf

UNIT = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


def sphere_mesh(res, r=0.4):
    return extract_isosurface(lambda p: sphere_sdf(p, r), res, UNIT)


def radial_error(mesh, r=0.4):
    return np.abs(np.linalg.norm(mesh.vertices, axis=1) - r).max()


def test_sphere_res32_accuracy_and_watertight():
    mesh = sphere_mesh(32)
    assert not mesh.is_empty()
    assert radial_error(mesh) < 2 / 32
    assert mesh.is_watertight()
    n = mesh.face_normals
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)
    assert not np.any(mesh.faces[:, 0] == mesh.faces[:, 1])


def test_normals_point_outward():
    mesh = sphere_mesh(24)
    centers = mesh.vertices[mesh.faces].mean(axis=1)
    assert np.all(np.sum(mesh.face_normals * centers, axis=1) > 0)


def test_refinement_converges():
    e32, e64 = radial_error(sphere_mesh(32)), radial_error(sphere_mesh(64))
    assert e64 <= 0.65 * e32


def test_constant_field_is_empty():
    assert extract_isosurface(lambda p: np.ones(len(p)), 8, UNIT).is_empty()


def test_axis_plane():
    mesh = extract_isosurface(lambda p: p[:, 0], 9, UNIT)
    assert len(mesh.vertices) > 0
    assert np.abs(mesh.vertices[:, 0]).max() < 1e-9


def test_non_finite_sample_reports_coordinate():
    def field(p):
        out = sphere_sdf(p, 0.3)
        out[5] = np.nan  # flat C-order index 5 on a 5^3 lattice
        return out

    with pytest.raises(ValueError, match=r"\(0, 1, 0\)"):
        extract_isosurface(field, 4, UNIT)


def test_bad_resolution_and_bounds():
    with pytest.raises(ValueError):
        extract_isosurface(lambda p: p[:, 0], 1, UNIT)
    with pytest.raises(ValueError):
        extract_isosurface(lambda p: p[:, 0], 4, ((0, 0, 0), (0, 1, 1)))


def test_single_cube_cases_are_closed_or_bounded():
    # every one of the 254 nontrivial corner patterns triangulates without bad indices
    from n2nsdf._mc_tables import CORNERS

    for case in range(1, 255):
        vals = np.ones((2, 2, 2))
        for v, (x, y, z) in enumerate(CORNERS):
            if case >> v & 1:
                vals[x, y, z] = -1.0
        mesh = marching_cubes(vals, (0, 0, 0), 1.0)
        assert len(mesh.faces) > 0
        assert mesh.vertices.min() >= 0 and mesh.vertices.max() <= 1


def test_deterministic():
    a, b = sphere_mesh(16), sphere_mesh(16)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)


def test_extract_zero_level_from_network():
    from n2nsdf.sdf_net import SdfNetwork

    # relu net computing q_z - 0.1 exactly
    W0 = np.zeros((4, 1))
    W0[2, 0] = 1.0
    net = SdfNetwork((4, 1, 1), [W0, np.array([5.0]), np.ones((1, 1)), np.array([-5.1])], "relu", 1.0)
    mesh = extract_zero_level(net, np.zeros(1), 8)
    assert np.allclose(mesh.vertices[:, 2], 0.1, atol=1e-12)


def test_obj_unit_triangle(tmp_path):
    mesh = TriangleMesh(np.eye(3), [[0, 1, 2]])
    write_mesh(mesh, tmp_path / "t.obj")
    lines = (tmp_path / "t.obj").read_text().splitlines()
    assert lines[-1] == "f 1 2 3" and sum(line.startswith("f ") for line in lines) == 1


@pytest.mark.parametrize("ext", ["obj", "ply"])
def test_empty_mesh_roundtrip(tmp_path, ext):
    write_mesh(TriangleMesh.empty(), tmp_path / f"e.{ext}")
    assert read_mesh(tmp_path / f"e.{ext}").is_empty()


def test_roundtrip_random_mesh(tmp_path):
    rng = np.random.default_rng(0)
    mesh = TriangleMesh(rng.uniform(-1, 1, (30, 3)), rng.integers(0, 30, (50, 3)))
    write_mesh(mesh, tmp_path / "m.obj")
    back = read_mesh(tmp_path / "m.obj")
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-9
    assert np.array_equal(back.faces, mesh.faces)
    write_mesh(mesh, tmp_path / "m.ply")
    back = read_mesh(tmp_path / "m.ply")
    assert np.array_equal(back.vertices, mesh.vertices.astype(np.float32).astype(float))
    assert np.array_equal(back.faces, mesh.faces)


def test_ply_header_layout(tmp_path):
    write_mesh(sphere_mesh(8), tmp_path / "s.ply")
    head = (tmp_path / "s.ply").read_bytes().split(b"end_header\n")[0].decode()
    assert "binary_little_endian" in head and "property float x" in head
    assert "property list uchar int vertex_indices" in head


def test_write_unknown_format(tmp_path):
    with pytest.raises(ValueError, match="stl"):
        write_mesh(TriangleMesh.empty(), tmp_path / "x.stl")


def test_face_index_validation():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
