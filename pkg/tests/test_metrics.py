import json

import jsonschema
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from n2nsdf.mesher import TriangleMesh
from n2nsdf.metrics import (
    REPORT_SCHEMA,
    chamfer,
    evaluate_mesh,
    evaluate_samples,
    f_score,
    normal_consistency,
    precision_recall,
    sample_mesh,
)
from n2nsdf.testkit import brute_chamfer, sphere_points


def test_sample_single_triangle():
    tri = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    pts, nrm = sample_mesh(TriangleMesh(tri, [[0, 1, 2]]), 2000, np.random.default_rng(0))
    x, y = pts[:, 0], pts[:, 1]
    assert np.all(x >= 0) and np.all(y >= 0) and np.all(x + y <= 1 + 1e-12)
    assert np.allclose(pts[:, 2], 0) and np.allclose(nrm, [0, 0, 1])


def test_sample_area_split():
    v = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [5.0, 0, 0], [8.0, 0, 0], [5.0, 2, 0]])
    mesh = TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])
    areas = mesh.face_areas()
    pts, _ = sample_mesh(mesh, 100_000, np.random.default_rng(1))
    frac = np.mean(pts[:, 0] >= 5.0)
    assert abs(frac - areas[1] / areas.sum()) < 0.02


def test_sample_three_to_one():
    v = np.array([[0.0, 0, 0], [3.0, 0, 0], [0.0, 1, 0], [10.0, 0, 0], [11.0, 0, 0], [10.0, 1, 0]])
    mesh = TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])
    pts, nrm = sample_mesh(mesh, 100_000, np.random.default_rng(2))
    assert abs(np.mean(pts[:, 0] < 5.0) - 0.75) < 0.02
    assert np.allclose(np.linalg.norm(nrm, axis=1), 1.0)


def test_sample_rejects_degenerate():
    with pytest.raises(ValueError):
        sample_mesh(TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]]), 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_mesh(TriangleMesh.empty(), 10, np.random.default_rng(0))


def test_chamfer_basics():
    A = np.random.default_rng(3).standard_normal((20, 3))
    assert chamfer(A, A, "L1") == 0.0 and chamfer(A, A, "L2") == 0.0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]], "L1") == 1.0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]], "L2") == 1.0
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), A)


@pytest.mark.parametrize("order", ["L1", "L2"])
def test_chamfer_matches_brute_force(order):
    rng = np.random.default_rng(4)
    A, B = rng.standard_normal((50, 3)), rng.standard_normal((50, 3))
    assert abs(chamfer(A, B, order) - brute_chamfer(A, B, order)) < 1e-12
    assert chamfer(A, B, order) == pytest.approx(chamfer(B, A, order), abs=1e-15)
    assert chamfer(A, B, "L2") > 0


def test_normal_consistency():
    rng = np.random.default_rng(5)
    p = rng.standard_normal((30, 3))
    n = p / np.linalg.norm(p, axis=1, keepdims=True)
    assert normal_consistency((p, n), (p, n)) == 1.0
    nz = np.tile([0.0, 0, 1], (30, 1))
    nx = np.tile([1.0, 0, 0], (30, 1))
    assert normal_consistency((p, nz), (p, nx)) == 0.0
    with pytest.raises(ValueError, match="unit"):
        normal_consistency((p, 2 * n), (p, n))


def test_normal_consistency_close_spheres():
    rng = np.random.default_rng(6)
    a = sphere_points(20000, 1.0, rng)
    b = sphere_points(20000, 1.001, rng)
    assert normal_consistency((a, a), (b, b / 1.001)) > 0.99


def test_f_score():
    A = np.random.default_rng(7).standard_normal((10, 3))
    assert f_score(A, A, 1e-9) == 1.0
    assert f_score(A, A + 10.0, 0.01) == 0.0
    P, R = precision_recall([[0, 0, 0], [1, 0, 0]], [[0, 0, 0]], 0.5)
    assert (P, R) == (0.5, 1.0)
    assert f_score([[0, 0, 0], [1, 0, 0]], [[0, 0, 0]], 0.5) == pytest.approx(2 / 3)
    assert f_score([[0, 0, 0]], [[0, 0, 0], [1, 0, 0]], 0.5) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        f_score(A, A, 0.0)


def test_rigid_motion_invariance():
    rng = np.random.default_rng(8)
    pa, pb = rng.standard_normal((200, 3)), rng.standard_normal((200, 3))
    na = pa / np.linalg.norm(pa, axis=1, keepdims=True)
    nb = pb / np.linalg.norm(pb, axis=1, keepdims=True)
    R = Rotation.random(random_state=9).as_matrix()
    t = rng.standard_normal(3)
    base = evaluate_samples((pa, na), (pb, nb), 0.3)
    moved = evaluate_samples((pa @ R.T + t, na @ R.T), (pb @ R.T + t, nb @ R.T), 0.3)
    for key in ("cd_l1", "cd_l2", "nc", "f_score"):
        assert abs(getattr(base, key) - getattr(moved, key)) < 1e-9


def test_report_schema_and_empty_mesh(tmp_path):
    rng = np.random.default_rng(10)
    p = sphere_points(100, 1.0, rng)
    gt = (p, p)
    rep = evaluate_mesh(TriangleMesh.empty(), gt, 100, rng, config={"seed": 0})
    assert rep.empty_reconstruction and rep.cd_l2 is None
    jsonschema.validate(json.loads(rep.to_json()), REPORT_SCHEMA)
    rep.save(tmp_path / "r.json")
    jsonschema.validate(json.loads((tmp_path / "r.json").read_text()), REPORT_SCHEMA)
