import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Polygon, box

from oracles import collision_full_scan
from splathitl.geometry import Pose6D, RigidTransform, plane_frame
from splathitl.renderer import CameraIntrinsics
from splathitl.renderer.camera import FrameRGBD
from splathitl.world_model import (
    DynamicWindow,
    Geofence,
    GridError,
    OccupancyGrid,
    OverlayStyle,
    apply_homography,
    build_grid,
    check_collision,
    check_geofence,
    dynamic_occupancy,
    export_grid,
    hand_angle,
    hand_corners,
    import_grid,
    in_hand,
    overlay_hand,
    plane_homography,
    window_collision,
)


def window(theta0=0.0, omega=math.pi / 2, L=0.5, width=0.1, border=0.1, pose=None):
    return DynamicWindow(pose or RigidTransform(), (0.6, 0.6), L, width, omega, theta0, border)


# --- grid --------------------------------------------------------------------

def test_single_point_one_voxel():
    g = build_grid([[0, 0, 0]], 0.1)
    assert g.dims == (1, 1, 1) and g.count() == 1


def test_two_points_ten_voxels_apart():
    g = build_grid([[0, 0, 0], [1, 0, 0]], 0.1)
    occ = np.argwhere(g.occupied)
    assert len(occ) == 2
    assert occ[1][0] - occ[0][0] == 10


def test_empty_points_and_bad_sizes_rejected():
    with pytest.raises(GridError):
        build_grid(np.zeros((0, 3)))
    with pytest.raises(GridError):
        build_grid([[0, 0, 0]], 0.0)
    with pytest.raises(GridError):
        OccupancyGrid(np.zeros(3), 0.1, np.zeros((0, 1, 1), bool))


def test_binning_matches_floor_division_oracle():
    rng = np.random.default_rng(0)
    pts = rng.normal(0, 2, (10_000, 3))
    g = build_grid(pts, 0.17, 0.05)
    ref = np.zeros(g.dims, bool)
    lo = pts.min(axis=0) - 0.05
    for p in pts:
        i = [min(int(math.floor((p[k] - lo[k]) / 0.17)), g.dims[k] - 1) for k in range(3)]
        ref[tuple(i)] = True
    np.testing.assert_allclose(g.origin, lo)
    np.testing.assert_array_equal(g.occupied, ref)


def test_index_bijective_inside_bounds():
    g = build_grid(np.random.default_rng(1).uniform(0, 1, (50, 3)), 0.1)
    for idx in itertools.product(*(range(d) for d in g.dims)):
        np.testing.assert_array_equal(g.index(g.center(idx)), idx)


def test_collision_examples():
    empty = OccupancyGrid(np.zeros(3), 0.1, np.zeros((4, 4, 4), bool))
    assert not check_collision(empty, [0.2, 0.2, 0.2], 5.0)
    one = OccupancyGrid([0.95, 0.95, 0.95], 0.1, np.ones((1, 1, 1), bool))
    assert check_collision(one, [1.05, 1, 1], 0.2)
    assert not check_collision(one, [1.3, 1, 1], 0.2)
    assert not check_collision(one, [50, 50, 50], 0.2)
    with pytest.raises(ValueError):
        check_collision(one, [1, 1, 1], 0.0)


def test_collision_matches_full_scan_100():
    rng = np.random.default_rng(2)
    for _ in range(100):
        g = build_grid(rng.uniform(-1, 1, (int(rng.integers(1, 80)), 3)), float(rng.uniform(0.05, 0.3)))
        c, r = rng.uniform(-1.5, 1.5, 3), float(rng.uniform(0.01, 1.0))
        assert check_collision(g, c, r) == collision_full_scan(g, c, r)


def test_collision_only_visits_sphere_aabb():
    class Spy(np.ndarray):
        slices = []

        def __getitem__(self, key):
            Spy.slices.append(key)
            return super().__getitem__(key)

    occ = np.zeros((200, 200, 200), bool)
    occ[100, 100, 100] = True
    g = OccupancyGrid(np.zeros(3), 0.1, occ)
    object.__setattr__(g, "occupied", occ.view(Spy))
    assert check_collision(g, [10.05, 10.05, 10.05], 0.25)
    (key,) = Spy.slices
    assert all(s.stop - s.start <= 6 for s in key)


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_collision_monotone_in_radius(seed, r, dr):
    rng = np.random.default_rng(seed)
    g = build_grid(rng.uniform(-1, 1, (30, 3)), 0.1)
    c = rng.uniform(-1.2, 1.2, 3)
    if check_collision(g, c, r):
        assert check_collision(g, c, r + dr)


def test_grid_export_round_trip_and_bit_order(tmp_path):
    occ = np.zeros((3, 2, 2), bool)
    occ[1, 0, 0] = True  # flat index 1 with x fastest
    occ[2, 1, 1] = True  # flat index 2 + 3*1 + 6*1 = 11
    g = OccupancyGrid([0.5, -1, 2], 0.25, occ)
    p = tmp_path / "g.bin"
    export_grid(g, p)
    data = p.read_bytes()
    assert len(data) == 4 * 8 + 3 * 4 + 2
    assert data[44] == 0b0000_0010 and data[45] == 0b0000_1000
    back = import_grid(p)
    np.testing.assert_array_equal(back.occupied, occ)
    np.testing.assert_allclose(back.origin, g.origin)
    assert back.voxel_size == 0.25


def test_grid_import_rejects_short_files(tmp_path):
    p = tmp_path / "g.bin"
    p.write_bytes(b"\x00" * 10)
    with pytest.raises(GridError):
        import_grid(p)


# --- geofence ----------------------------------------------------------------

FENCE = Geofence((0, 0, 0), (11, 4.5, 3.65))


def test_geofence_examples():
    assert check_geofence(FENCE, [5, 2, 1])
    assert not check_geofence(FENCE, [12, 2, 1])
    assert check_geofence(FENCE, [11, 2, 1])
    with pytest.raises(ValueError):
        Geofence((0, 0, 0), (1, 0, 1))


@given(st.lists(st.floats(-2, 13), min_size=3, max_size=3), st.permutations([0, 1, 2]))
def test_geofence_axis_permutation_invariant(p, perm):
    lo, hi = np.array([0, 0, 0.0]), np.array([11, 4.5, 3.65])
    permuted = Geofence(lo[perm], hi[perm])
    assert check_geofence(FENCE, p) == check_geofence(permuted, np.asarray(p)[perm])


# --- dynamic window ----------------------------------------------------------

def test_window_invariants():
    with pytest.raises(ValueError):
        window(L=0.7)
    with pytest.raises(ValueError):
        window(omega=math.inf)
    assert window(omega=0.0).period == math.inf


def test_hand_angle_examples():
    w = window()
    assert hand_angle(w, 1.0) == pytest.approx(math.pi / 2)
    assert hand_angle(w, 4.0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        hand_angle(w, -1.0)


@given(st.floats(-10, 10), st.floats(-5, 5), st.floats(0, 1000))
def test_hand_angle_matches_wrap_formula(theta0, omega, t):
    w = window(theta0, omega)
    a = hand_angle(w, t)
    assert 0.0 <= a < 2 * math.pi
    ref = (theta0 + omega * t) % (2 * math.pi)
    diff = abs(a - ref)
    assert min(diff, 2 * math.pi - diff) < 1e-9


def test_dynamic_occupancy_examples():
    w = window(border=0.1)
    vs = 0.05
    cells = {tuple(c) for c in dynamic_occupancy(w, 0.0, vs)}
    assert (5, 0) in cells  # (L/2, 0)
    assert (-5, 0) not in cells
    assert (-8, -8) not in cells  # aperture interior away from hand and border
    assert (int(round(0.65 / vs)), 0) in cells  # border ring


def _hand_polygon(w, t):
    return Polygon(hand_corners(w, t))


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 100), st.floats(0.02, 0.2), st.floats(-3, 3))
def test_dynamic_occupancy_matches_polygon_oracle(t, vs, theta0):
    w = window(theta0=theta0, omega=0.7, border=0.0)
    got = {tuple(c) for c in dynamic_occupancy(w, t, vs)}
    hand = _hand_polygon(w, t)
    n = int(math.ceil(0.6 / vs)) + 2
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            cell = box((i - 0.5) * vs, (j - 0.5) * vs, (i + 0.5) * vs, (j + 0.5) * vs)
            inter = cell.intersection(hand)
            if inter.area > 1e-9:
                assert (i, j) in got
            elif not cell.intersects(hand):
                assert (i, j) not in got


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 50), st.floats(0.1, 3.0))
def test_dynamic_occupancy_periodic(t, omega):
    w = window(theta0=0.4, omega=omega)
    np.testing.assert_array_equal(dynamic_occupancy(w, t, 0.05), dynamic_occupancy(w, t + w.period, 0.05))


def test_in_hand_and_window_collision():
    w = window()
    assert in_hand(w, [0.25, 0.0], 0.0)
    assert not in_hand(w, [-0.25, 0.0], 0.0)
    assert in_hand(w, [0.0, 0.25], 1.0)  # hand points up at t=1
    assert window_collision(w, 0.0, [0.25, 0.0, 0.05], 0.1, 0.05)
    assert not window_collision(w, 0.0, [-0.25, -0.25, 0.0], 0.1, 0.05)
    assert not window_collision(w, 0.0, [0.25, 0.0, 0.5], 0.2, 0.05)


# --- homography and overlay --------------------------------------------------

K = CameraIntrinsics(100.0, 100.0, 32.0, 24.0, 65, 49, near=0.1, far=50.0)


def head_on(distance=2.0):
    """Window plane facing the camera at ``distance``; plane x = image right, plane y = image down."""
    return window(pose=plane_frame((0, 0, distance), (0, 0, 1)))


def blank_frame(depth=0.0):
    return FrameRGBD(np.zeros((K.height, K.width, 3), np.uint8), np.full((K.height, K.width), depth, np.float32))


def test_overlay_head_on_band_and_depth():
    w = head_on()
    cam = Pose6D(np.zeros(3))
    out = overlay_hand(blank_frame(), cam, K, w, 0.0, OverlayStyle((10, 200, 30)))
    assert out.depth[24, 32] == pytest.approx(2.0, abs=1e-6)
    painted = np.argwhere(np.any(out.rgb != 0, axis=-1))
    rows = set(painted[:, 0])
    assert rows == {22, 23, 24, 25, 26}  # 0.1 m hand at 2 m spans +-2.5 px around cy=24
    # columns 32..57 span the 0.5 m hand; the last one sits exactly on its tip
    assert painted[:, 1].min() == 32 and painted[:, 1].max() in (56, 57)
    assert tuple(out.rgb[24, 40]) == (10, 200, 30)


def test_overlay_respects_nearer_scene_and_ignores_far_scene():
    w = head_on()
    cam = Pose6D(np.zeros(3))
    occluded = overlay_hand(blank_frame(1.0), cam, K, w, 0.0)
    assert np.all(occluded.rgb == 0) and np.all(occluded.depth == 1.0)
    behind = overlay_hand(blank_frame(5.0), cam, K, w, 0.0)
    assert behind.depth[24, 40] == pytest.approx(2.0, abs=1e-6)


def test_overlay_behind_camera_or_out_of_view_unchanged():
    f = blank_frame()
    behind = window(pose=plane_frame((0, 0, -2), (0, 0, 1)))
    out = overlay_hand(f, Pose6D(np.zeros(3)), K, behind, 0.0)
    assert np.array_equal(out.rgb, f.rgb) and np.array_equal(out.depth, f.depth)
    aside = window(pose=plane_frame((30, 0, 2), (0, 0, 1)))
    out = overlay_hand(f, Pose6D(np.zeros(3)), K, aside, 0.0)
    assert np.array_equal(out.rgb, f.rgb) and np.array_equal(out.depth, f.depth)


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1))
def test_homography_equals_projection_for_interior_points(seed):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=3)
    w = window(pose=plane_frame(rng.uniform(-3, 3, 3), n / np.linalg.norm(n)))
    cam = Pose6D(w.pose.apply(rng.uniform([-1, -1, 1], [1, 1, 4])), rng.normal(size=4))
    xy = rng.uniform(-0.6, 0.6, (20, 2))
    pc = cam.world_to_local().apply(w.pose.apply(np.column_stack([xy, np.zeros(20)])))
    front = pc[:, 2] > 0.1
    if not front.any():
        return
    direct = np.column_stack([K.fx * pc[:, 0] / pc[:, 2] + K.cx, K.fy * pc[:, 1] / pc[:, 2] + K.cy])
    via = apply_homography(plane_homography(cam, K, w), xy)
    np.testing.assert_allclose(via[front], direct[front], atol=1e-6)
