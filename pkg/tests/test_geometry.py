import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from n2nsdf.geometry import (
    AffineTransform,
    CloudFormat,
    KnnIndex,
    LocalRegion,
    PointCloud,
    SplitParams,
    add_noise,
    normalize_to_unit,
    read_point_cloud,
    sample_local_region,
    sample_queries,
    split_strategy,
    write_point_cloud,
)
from n2nsdf.testkit import knn_scan, moment_check, sphere_points


def cloud(n, seed=0):
    return PointCloud(np.random.default_rng(seed).uniform(-1, 1, (n, 3)), "noisy")


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), "smoothed")


def test_normalize_cube_corners():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    pc, tf = normalize_to_unit(PointCloud(corners))
    assert tf.scale == 1.0
    assert np.allclose(np.abs(pc.points), 0.5)


def test_normalize_two_points():
    pc, tf = normalize_to_unit(PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]])))
    assert np.allclose(pc.points, [[-0.5, 0, 0], [0.5, 0, 0]])
    assert tf.scale == 0.5


def test_normalize_rejects_degenerate():
    with pytest.raises(ValueError):
        normalize_to_unit(PointCloud(np.ones((4, 3))))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (20, 3), elements=st.floats(-1e3, 1e3)))
def test_normalize_bounds_and_roundtrip(pts):
    if np.ptp(pts, axis=0).max() < 1e-6:
        return
    pc, tf = normalize_to_unit(PointCloud(pts))
    assert np.all(np.abs(pc.points) <= 0.5 + 1e-12)
    assert np.allclose(tf.inverse(pc.points), pts, rtol=0, atol=1e-12 * max(1.0, np.abs(pts).max()))
    assert AffineTransform.from_dict(tf.to_dict()) == tf


def test_knn_colinear():
    idx = KnnIndex(np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]))
    assert [i for i, _ in idx.knn([0.9, 0, 0], 2)] == [1, 0]


def test_knn_self_query():
    pc = cloud(50)
    idx = KnnIndex.from_cloud(pc)
    (i, d), = idx.knn(pc.points[17], 1)
    assert i == 17 and d == 0.0


def test_knn_ties_by_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, 0, 5.0]])
    idx = KnnIndex(pts)
    assert [i for i, _ in idx.knn([0, 0, 0], 3)] == [0, 1, 2]


def test_knn_k_out_of_range():
    idx = KnnIndex(cloud(5).points)
    for k in (0, 6):
        with pytest.raises(ValueError):
            idx.query([0, 0, 0], k)


@pytest.mark.parametrize("seed", range(3))
def test_knn_matches_scan(seed):
    pc = cloud(200, seed)
    idx = KnnIndex.from_cloud(pc)
    q = np.random.default_rng(seed + 100).uniform(-1, 1, 3)
    got = idx.knn(q, 10)
    want = knn_scan(pc.points, q, 10)
    assert [i for i, _ in got] == [i for i, _ in want]
    assert np.allclose([d for _, d in got], [d for _, d in want], rtol=0, atol=1e-15)


def test_knn_matches_scan_on_grid_with_ties():
    g = np.arange(4.0)
    pts = np.array([[x, y, z] for x in g for y in g for z in g])
    idx = KnnIndex(pts)
    for q in ([1.5, 1.5, 1.5], [0, 0, 0], [2, 1, 3]):
        assert [i for i, _ in idx.knn(q, 12)] == [i for i, _ in knn_scan(pts, q, 12)]


def test_query_scales_are_51st_neighbour():
    pc = cloud(300, 4)
    idx = KnnIndex.from_cloud(pc)
    for i in (0, 99, 250):
        assert idx.query_scales[i] == pytest.approx(knn_scan(pc.points, pc.points[i], 51)[-1][1])


def test_query_scales_small_cloud_falls_back():
    pc = cloud(10, 5)
    idx = KnnIndex.from_cloud(pc)
    far = knn_scan(pc.points, pc.points[3], 10)[-1][1]
    assert idx.query_scales[3] == pytest.approx(far)


def test_query_scales_floor_on_duplicates():
    idx = KnnIndex(np.zeros((60, 3)))
    assert np.all(idx.query_scales == 1e-6)


def test_local_region_whole_cloud():
    pc = cloud(80)
    idx = KnnIndex.from_cloud(pc)
    region = sample_local_region(pc, idx, 80, np.random.default_rng(0))
    assert sorted(region.members.tolist()) == list(range(80))
    assert region.members[0] == region.center
    assert np.all(region.scales > 0)


def test_local_region_deterministic_and_cap():
    rng = np.random.default_rng(1)
    pc = PointCloud(sphere_points(2000, 1.0, rng))
    idx = KnnIndex.from_cloud(pc)
    a = sample_local_region(pc, idx, 500, np.random.default_rng(9))
    b = sample_local_region(pc, idx, 500, np.random.default_rng(9))
    assert np.array_equal(a.members, b.members)
    c = pc.points[a.center]
    assert np.linalg.norm(pc.points[a.members] - c, axis=1).max() < 1.0
    with pytest.raises(ValueError):
        sample_local_region(pc, idx, 2001, rng)


def test_local_region_invariant_to_reordering():
    pc = cloud(300, 6)
    perm = np.random.default_rng(2).permutation(300)
    shuffled = PointCloud(pc.points[perm], pc.tag)
    ia, ib = KnnIndex.from_cloud(pc), KnnIndex.from_cloud(shuffled)
    from n2nsdf.geometry import region_around

    a = region_around(pc, ia, 10, 40)
    b = region_around(shuffled, ib, int(np.flatnonzero(perm == 10)[0]), 40)
    assert set(a.members.tolist()) == set(perm[b.members].tolist())


def test_queries_collapse_with_floor_scale():
    pc = cloud(20)
    region = LocalRegion(0, np.arange(20), np.full(20, 1e-6))
    q = sample_queries(region, pc, 100, np.random.default_rng(0))
    d = np.min(np.linalg.norm(q[:, None] - pc.points[None], axis=2), axis=1)
    assert d.max() < 1e-5


def test_queries_deterministic_and_statistics():
    pc = PointCloud(np.zeros((1, 3)))
    region = LocalRegion(0, np.array([0]), np.array([0.02]))
    q1 = sample_queries(region, pc, 100_000, np.random.default_rng(3))
    q2 = sample_queries(region, pc, 100_000, np.random.default_rng(3))
    assert q1.tobytes() == q2.tobytes()
    assert np.all(np.abs(q1.std(axis=0) / 0.02 - 1) < 0.03)


def test_queries_stay_near_their_members():
    pc = cloud(500, 7)
    idx = KnnIndex.from_cloud(pc)
    region = sample_local_region(pc, idx, 200, np.random.default_rng(4))
    q = sample_queries(region, pc, 10_000, np.random.default_rng(5))
    members = pc.points[region.members]
    d = np.linalg.norm(q[:, None] - members[None], axis=2)
    nearest = d.argmin(axis=1)
    assert np.mean(d[np.arange(len(q)), nearest] <= 6 * region.scales[nearest]) >= 0.99


def test_add_noise_zero_sigma():
    pc = cloud(30)
    out = add_noise(pc, 0.0, np.random.default_rng(0))
    assert np.array_equal(out.points, pc.points) and out.tag == "noisy"


@pytest.mark.parametrize("kind", ["gaussian", "uniform"])
def test_add_noise_statistics(kind):
    n = 100_000
    pc = PointCloud(np.zeros((n, 3)))
    sigma = 0.05
    out = add_noise(pc, sigma, np.random.default_rng(1), kind)
    assert np.all(np.abs(out.points.std(axis=0) / sigma - 1) < 0.03)
    assert np.all(np.abs(out.points.mean(axis=0)) < 4 * sigma / np.sqrt(n))
    assert moment_check(out.points[:, 0], 0.0, sigma)


def test_add_noise_rejects_negative():
    with pytest.raises(ValueError):
        add_noise(cloud(3), -0.1, np.random.default_rng(0))


def test_split_sphere_knn_delegates():
    pc = cloud(400, 8)
    idx = KnnIndex.from_cloud(pc)
    a = split_strategy(pc, idx, "sphere-knn", SplitParams(K=50), np.random.default_rng(3))
    b = sample_local_region(pc, idx, 50, np.random.default_rng(3))
    assert np.array_equal(a.members, b.members)


def test_split_sphere_fixed_small_cloud():
    # every pair closer than the radius, whichever point is the center
    pc = PointCloud(np.random.default_rng(0).uniform(-0.025, 0.025, (50, 3)))
    idx = KnnIndex.from_cloud(pc)
    r = split_strategy(pc, idx, "sphere-fixed", SplitParams(radius=0.1), np.random.default_rng(1))
    assert sorted(r.members.tolist()) == list(range(50))


def test_split_voxel_cube_corners():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    pc = PointCloud(corners)
    idx = KnnIndex.from_cloud(pc)
    rng = np.random.default_rng(2)
    for _ in range(20):
        r = split_strategy(pc, idx, "voxel", SplitParams(grid=2), rng)
        assert len(r) == 1


def test_split_invalid_params():
    pc = cloud(20)
    idx = KnnIndex.from_cloud(pc)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        split_strategy(pc, idx, "sphere-fixed", SplitParams(radius=0.0), rng)
    with pytest.raises(ValueError):
        split_strategy(pc, idx, "voxel", SplitParams(grid=0), rng)
    with pytest.raises(ValueError):
        split_strategy(pc, idx, "octree", SplitParams(), rng)


def test_xyz_roundtrip_exact(tmp_path):
    pc = cloud(40, 9)
    write_point_cloud(tmp_path / "a.xyz", pc)
    back, fmt = read_point_cloud(tmp_path / "a.xyz")
    assert fmt.kind == "xyz" and np.array_equal(back.points, pc.points)


@pytest.mark.parametrize("dtype", ["<f4", "<f8"])
def test_ply_roundtrip(tmp_path, dtype):
    pc = cloud(40, 10)
    write_point_cloud(tmp_path / "a.ply", pc, CloudFormat("ply", dtype))
    back, fmt = read_point_cloud(tmp_path / "a.ply")
    assert fmt == CloudFormat("ply", dtype)
    assert np.array_equal(back.points, pc.points.astype(dtype).astype(float))


def test_read_empty_file(tmp_path):
    (tmp_path / "e.xyz").write_text("")
    with pytest.raises(ValueError, match="empty"):
        read_point_cloud(tmp_path / "e.xyz")
