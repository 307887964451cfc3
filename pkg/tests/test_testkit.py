import numpy as np
import pytest

from n2nsdf.testkit import (
    ORACLES,
    box_sdf,
    brute_chamfer,
    brute_force_emd,
    finite_diff_gradient,
    knn_scan,
    max_relative_error,
    moment_check,
    sphere_gradient,
    sphere_points,
    sphere_sdf,
)


def test_brute_emd_trivial_cases():
    assert brute_force_emd([[0, 0, 0]], [[1, 2, 2]]) == 9.0
    assert brute_force_emd([[0, 0, 0]], [[1, 2, 2]], "euclidean") == 3.0
    A = np.random.default_rng(0).standard_normal((5, 3))
    assert brute_force_emd(A, A[::-1]) == 0.0


def test_brute_emd_limits():
    with pytest.raises(ValueError, match="7"):
        brute_force_emd(np.zeros((8, 3)), np.zeros((8, 3)))
    with pytest.raises(ValueError):
        brute_force_emd(np.zeros((2, 3)), np.zeros((3, 3)))


def test_finite_differences():
    x = np.array([[0.3, -1.0], [2.0, 0.5]])
    assert np.allclose(finite_diff_gradient(lambda v: float(np.sum(v**2)), x), 2 * x, atol=1e-8)
    assert not finite_diff_gradient(lambda v: 4.0, x).any()


def test_relative_error_floor():
    assert max_relative_error([0.0], [0.0]) == 0.0
    assert max_relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)


def test_knn_scan_ties_to_lower_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 2.0, 0]])
    assert knn_scan(pts, [0, 0, 0], 2) == [(0, 1.0), (1, 1.0)]


def test_brute_chamfer():
    assert brute_chamfer([[0, 0, 0]], [[2, 0, 0]], "L1") == 2.0
    assert brute_chamfer([[0, 0, 0]], [[2, 0, 0]], "L2") == 4.0


def test_moment_check():
    rng = np.random.default_rng(1)
    assert moment_check(rng.normal(0, 0.5, 20000), 0.0, 0.5)
    assert not moment_check(rng.normal(0, 0.6, 20000), 0.0, 0.5)


def test_closed_forms():
    assert sphere_sdf([0, 0, 0], 2.0) == -2.0
    assert np.allclose(sphere_gradient([[0, 3.0, 0]]), [[0, 1, 0]])
    assert box_sdf([0.5, 0, 0], [0.3, 0.3, 0.3]) == pytest.approx(0.2)
    assert box_sdf([0, 0, 0], [0.3, 0.2, 0.4]) == pytest.approx(-0.2)
    p = sphere_points(100, 0.7, np.random.default_rng(2), (1, 1, 1))
    assert np.allclose(np.linalg.norm(p - 1, axis=1), 0.7)


def test_oracle_registry():
    assert ORACLES["factorial-emd"].tolerance == 1e-12
    assert ORACLES["knn-scan"].tolerance == 0.0
