import numpy as np
import pytest

from flio.imu import Gravity, GRAVITY_MAGNITUDE, ImuSample, InsPoseBuffer, NavState
from flio.pointcloud import (
    KeyframeMap,
    LidarFrame,
    build_keyframe_map,
    fit_plane,
    fit_planes,
    knn,
    new_frame,
    undistort_frame,
    voxel_downsample,
)
from flio.rotations import Pose, quat_exp, quat_identity

G = GRAVITY_MAGNITUDE
IDENTITY = Pose(np.zeros(3), quat_identity())


def constant_velocity_buffer(v=(1.0, 0.0, 0.0), duration=1.0, rate=200.0):
    buf = InsPoseBuffer(Gravity())
    state = NavState(0.0, np.zeros(3), quat_identity(), np.asarray(v, dtype=float),
                     np.zeros(3), np.zeros(3))
    f = np.array([0.0, 0.0, -G])
    buf.start(state, ImuSample(0.0, np.zeros(3), f))
    for k in range(1, int(duration * rate) + 1):
        buf.push(ImuSample(k / rate, np.zeros(3), f))
    return buf


# --------------------------------------------------------------------------- #
# frames
# --------------------------------------------------------------------------- #

def test_new_frame_range_gate_and_sorting():
    xyz = np.array([[10.0, 0.0, 0.0], [0.1, 0.0, 0.0], [500.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    t = np.array([0.03, 0.01, 0.02, 0.0])
    frame = new_frame(0.0, t, xyz)
    assert len(frame) == 2  # 0.1 m and 500 m points gated out
    assert list(frame.t_offsets) == [0.0, 0.03]
    np.testing.assert_allclose(frame.xyz[0], [2.0, 0.0, 0.0])


def test_new_frame_rejects_negative_offsets():
    with pytest.raises(ValueError):
        new_frame(0.0, np.array([-0.01]), np.array([[1.0, 0.0, 0.0]]))


# --------------------------------------------------------------------------- #
# voxel filter
# --------------------------------------------------------------------------- #

def test_voxel_merges_close_points():
    pts = np.array([[0.1, 0.1, 0.1], [0.2, 0.1, 0.1]])
    out = voxel_downsample(pts, 0.5)
    assert out.shape == (1, 3)
    np.testing.assert_allclose(out[0], [0.15, 0.1, 0.1])


def test_voxel_preserves_grid_points():
    g = np.arange(5, dtype=float)
    pts = np.array([[x, y, 0.25] for x in g for y in g]) + 0.25
    out = voxel_downsample(pts, 0.5)
    assert len(out) == len(pts)


def test_voxel_occupancy_matches_hash_oracle():
    rng = np.random.default_rng(40)
    pts = rng.uniform(0.0, 10.0, size=(10_000, 3))
    leaf = 0.5
    out = voxel_downsample(pts, leaf)
    occupied = {tuple(c) for c in np.floor(pts / leaf).astype(int)}
    assert len(out) == len(occupied)
    # every centroid stays inside its own voxel
    out_cells = {tuple(c) for c in np.floor(out / leaf).astype(int)}
    assert out_cells == occupied


def test_voxel_idempotent():
    rng = np.random.default_rng(41)
    pts = rng.uniform(-20.0, 20.0, size=(5000, 3))
    once = voxel_downsample(pts, 0.5)
    twice = voxel_downsample(once, 0.5)
    np.testing.assert_allclose(once, twice, atol=0)


def test_voxel_rejects_bad_leaf():
    with pytest.raises(ValueError):
        voxel_downsample(np.zeros((1, 3)), 0.0)


# --------------------------------------------------------------------------- #
# knn
# --------------------------------------------------------------------------- #

def test_knn_single_point_map():
    m = KeyframeMap(0, np.array([[1.0, 2.0, 3.0]]))
    d, pts = knn(m, np.zeros(3), 5)
    assert len(pts) == 1
    np.testing.assert_allclose(pts[0], [1.0, 2.0, 3.0])


def test_knn_exact_hit_first():
    rng = np.random.default_rng(42)
    pts = rng.normal(size=(50, 3))
    m = KeyframeMap(0, pts)
    d, out = knn(m, pts[17], 3)
    assert d[0] == 0.0
    np.testing.assert_allclose(out[0], pts[17])


def test_knn_matches_brute_force_oracle():
    rng = np.random.default_rng(43)
    pts = rng.uniform(-5, 5, size=(1000, 3))
    m = KeyframeMap(0, pts)
    for _ in range(100):
        q = rng.uniform(-5, 5, size=3)
        d, out = knn(m, q, 5)
        brute = np.sort(np.linalg.norm(pts - q, axis=1))[:5]
        np.testing.assert_allclose(d, brute, atol=1e-12)


def test_empty_map_rejected():
    with pytest.raises(ValueError):
        KeyframeMap(0, np.zeros((0, 3)))


# --------------------------------------------------------------------------- #
# plane fitting
# --------------------------------------------------------------------------- #

def test_fit_plane_axis_aligned():
    pts = np.array([[1.0, 0, 2], [-1, 0, 2], [0, 1, 2], [0, -1, 2], [0.3, 0.4, 2]])
    plane = fit_plane(pts)
    assert plane is not None
    assert abs(abs(plane.normal[2]) - 1.0) < 1e-10
    # n^T p + d = 0 on the plane
    np.testing.assert_allclose(pts @ plane.normal + plane.d, np.zeros(5), atol=1e-10)
    assert abs(np.linalg.norm(plane.normal) - 1.0) < 1e-10


def test_fit_plane_rejects_lifted_point():
    pts = np.array([[1.0, 0, 2], [-1, 0, 2], [0, 1, 2], [0, -1, 2], [0.0, 0.0, 2.2]])
    assert fit_plane(pts) is None


def test_fit_plane_rejects_collinear():
    s = np.linspace(0, 1, 5)
    pts = np.stack([1 + s, 2 * s, 3 - s], axis=1)
    assert fit_plane(pts) is None


def test_fit_plane_random_planes():
    rng = np.random.default_rng(44)
    for _ in range(50):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        d = rng.uniform(1.0, 10.0)
        # orthonormal in-plane basis
        u = np.cross(n, [1.0, 0.0, 0.0])
        if np.linalg.norm(u) < 1e-6:
            u = np.cross(n, [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        coeffs = rng.uniform(-1, 1, size=(5, 2))
        pts = -d * n + coeffs @ np.stack([u, v])
        plane = fit_plane(pts)
        if plane is None:
            continue  # occasional near-collinear draw
        np.testing.assert_allclose(pts @ plane.normal + plane.d, np.zeros(5), atol=1e-9)


def test_fit_planes_batch_consistency():
    rng = np.random.default_rng(45)
    stacks = rng.uniform(-1, 1, size=(20, 5, 3)) + np.array([0.0, 0.0, 3.0])
    normals, ds, valid = fit_planes(stacks)
    for i in range(20):
        single = fit_plane(stacks[i])
        assert valid[i] == (single is not None)
        if single is not None:
            np.testing.assert_allclose(normals[i], single.normal, atol=1e-12)
            assert ds[i] == pytest.approx(single.d, abs=1e-12)


# --------------------------------------------------------------------------- #
# undistortion
# --------------------------------------------------------------------------- #

def test_undistort_stationary_is_identity():
    buf = constant_velocity_buffer(v=(0.0, 0.0, 0.0))
    frame = new_frame(0.1, np.linspace(0, 0.09, 10), np.tile([5.0, 1.0, 0.5], (10, 1)))
    out = undistort_frame(frame, buf, IDENTITY, 0.0)
    np.testing.assert_allclose(out.xyz, frame.xyz, atol=1e-12)


def test_undistort_constant_velocity_preserves_world_position():
    v = np.array([1.0, 0.0, 0.0])
    buf = constant_velocity_buffer(v=v)
    t_off = np.array([0.0, 0.05])
    raw = np.array([[5.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
    frame = new_frame(0.2, t_off, raw)
    out = undistort_frame(frame, buf, IDENTITY, 0.0)
    # sensor origin moved +0.05 m between anchor and second sample
    np.testing.assert_allclose(out.xyz[0], [5.0, 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(out.xyz[1], [5.05, 0.0, 0.0], atol=1e-9)
    # world position of each point is preserved
    anchor_pos = buf.pose_at(0.2).translation
    for k in range(2):
        world_before = raw[k] + buf.pose_at(0.2 + t_off[k]).translation
        world_after = out.xyz[k] + anchor_pos
        np.testing.assert_allclose(world_after, world_before, atol=1e-9)


def test_undistort_with_extrinsics_and_delay():
    buf = constant_velocity_buffer(v=(2.0, 0.0, 0.0))
    T_b_r = Pose(np.array([0.1, 0.0, 0.0]), quat_exp(np.array([0.0, 0.0, 0.02])))
    frame = new_frame(0.1, np.array([0.0, 0.04]), np.array([[4.0, 1.0, 0.0], [4.0, 1.0, 0.0]]))
    t_d = 0.01
    out = undistort_frame(frame, buf, T_b_r, t_d)
    # oracle: chain each point through its own sampled pose
    for k in range(2):
        t = frame.stamp + frame.t_offsets[k] + t_d
        T_w_r = buf.pose_at(t).compose(T_b_r)
        world = T_w_r.transform(frame.xyz[k])
        T_anchor = buf.pose_at(frame.stamp + t_d).compose(T_b_r)
        np.testing.assert_allclose(out.xyz[k], T_anchor.inverse().transform(world), atol=1e-10)


def test_undistort_buffer_gap_raises():
    buf = constant_velocity_buffer(duration=0.05)
    frame = new_frame(0.0, np.array([0.0, 0.09]), np.tile([5.0, 0.0, 0.0], (2, 1)))
    with pytest.raises(ValueError):
        undistort_frame(frame, buf, IDENTITY, 0.0)


# --------------------------------------------------------------------------- #
# keyframe map accumulation
# --------------------------------------------------------------------------- #

def test_map_no_intermediates_is_downsampled_keyframe():
    buf = constant_velocity_buffer(v=(0.0, 0.0, 0.0))
    rng = np.random.default_rng(46)
    cloud = rng.uniform(2.0, 8.0, size=(200, 3))
    frame = LidarFrame(0.1, np.zeros(200), cloud)
    m = build_keyframe_map(0, frame, [], buf, IDENTITY, 0.0, 0.5)
    np.testing.assert_allclose(m.points, voxel_downsample(cloud, 0.5), atol=0)


def test_map_projection_matches_rigid_transform_oracle():
    # hand-crafted buffer: identity at t=0, a known pose T at t=0.2
    buf = InsPoseBuffer(Gravity())
    q_T = quat_exp(np.array([0.0, 0.0, 0.3]))
    p_T = np.array([1.0, -0.5, 0.2])
    s0 = NavState(0.0, np.zeros(3), quat_identity(), np.zeros(3), np.zeros(3), np.zeros(3))
    s1 = NavState(0.2, p_T, q_T, np.zeros(3), np.zeros(3), np.zeros(3))
    buf.states = [s0, s1]
    buf.samples = [ImuSample(0.0, np.zeros(3), np.zeros(3)),
                   ImuSample(0.2, np.zeros(3), np.zeros(3))]
    buf._arrays = None

    inter_cloud = np.array([[3.0, 0.0, 1.0], [4.0, 2.0, -1.0]])
    inter = LidarFrame(0.0, np.zeros(2), inter_cloud)
    kf_cloud = np.array([[10.0, 10.0, 10.0]])
    kf = LidarFrame(0.2, np.zeros(1), kf_cloud)

    m = build_keyframe_map(1, kf, [inter], buf, IDENTITY, 0.0, 0.5)
    T = Pose(p_T, q_T)
    expected = T.inverse().transform(inter_cloud)
    got = m.points
    for e in expected:
        assert np.min(np.linalg.norm(got - e, axis=1)) < 1e-10
    assert len(m) == 3


def test_map_count_at_least_downsampled_keyframe():
    buf = constant_velocity_buffer(v=(1.0, 0.0, 0.0), duration=0.5)
    rng = np.random.default_rng(47)
    kf_cloud = rng.uniform(2.0, 9.0, size=(300, 3))
    kf = LidarFrame(0.3, np.zeros(300), kf_cloud)
    inter = LidarFrame(0.1, np.zeros(100), rng.uniform(2.0, 9.0, size=(100, 3)))
    m = build_keyframe_map(2, kf, [inter], buf, IDENTITY, 0.0, 0.5)
    assert len(m) >= len(voxel_downsample(kf_cloud, 0.5))
