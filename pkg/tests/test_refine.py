import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radar_autocal.cluster import ObjectTrack, TargetCluster
from radar_autocal.core import Calibration, VehicleDims, VehiclePose, rot_z, rotation_error_angle
from radar_autocal.ingest import PoseTrack, try_pose_at
from radar_autocal.refine import (
    PlanarOffset,
    RefineParams,
    RefinementError,
    VehicleFootprint,
    accept_tracks,
    motion_compensate,
    nearest_target_correspondences,
    nearest_target_pairs,
    nelder_mead,
    optimize_planar_offset,
    point_in_footprint,
    polygon_loss,
    polygon_losses,
    refine_calibration,
    signed_area,
    vehicle_footprint,
)

UNIT = VehicleFootprint(np.array([[1.0, -1.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0]]))
BOX = VehicleDims(4.0, 2.0, 1.5, (0.0, 0.0, 0.0))


def pose(x=0.0, y=0.0, yaw=0.0, t=1, z=0.0):
    return VehiclePose(t, [x, y, z], [0, 0, yaw])


def test_footprint_axis_aligned():
    c = vehicle_footprint(pose(), BOX).corners
    assert sorted(map(tuple, c.tolist())) == sorted([(2, 1), (2, -1), (-2, 1), (-2, -1)])


def test_footprint_yaw_90():
    c = vehicle_footprint(pose(yaw=math.pi / 2), BOX).corners
    ref = [(-1, 2), (1, 2), (-1, -2), (1, -2)]
    assert sorted(map(tuple, np.round(c, 12).tolist())) == sorted(ref)


def test_footprint_rotation_oracle():
    dims = VehicleDims(4.0, 2.0, 1.5, (1.3, 0.0, 0.0))
    yaw = math.radians(30)
    fp = vehicle_footprint(pose(5, -3, yaw), dims)
    c, s = math.cos(yaw), math.sin(yaw)
    center = np.array([5 + 1.3 * c, -3 + 1.3 * s])
    for corner in fp.corners:
        local = corner - center
        # back-rotate by hand and compare with the box half-extents
        lx, ly = c * local[0] + s * local[1], -s * local[0] + c * local[1]
        assert abs(abs(lx) - 2.0) < 1e-12 and abs(abs(ly) - 1.0) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(0.5, 10), st.floats(0.5, 5))
def test_footprint_ccw_and_area(yaw, length, width):
    fp = vehicle_footprint(pose(3, 4, yaw), VehicleDims(length, width, 1.0, (0.7, 0.1, 0.0)))
    assert signed_area(fp.corners) > 0
    assert abs(fp.area - length * width) < 1e-6


def test_polygon_loss_examples():
    assert polygon_loss([0, 0], UNIT) == 0.0
    assert polygon_loss([1, 0.3], UNIT) == 0.0
    assert polygon_loss([2, 0], UNIT) == pytest.approx(math.sqrt(2))
    # nearest vertex of a unit square with a vertex at (1, 0)
    square = VehicleFootprint(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))
    assert polygon_loss([2, 0], square) == pytest.approx(1.0)


def test_edge_distance_variant():
    assert polygon_loss([3, 0], UNIT, edge_distance=True) == pytest.approx(2.0)
    assert polygon_loss([3, 0], UNIT) == pytest.approx(math.hypot(2, 1))


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-100, 100), st.floats(-100, 100), st.floats(-math.pi, math.pi))
def test_polygon_loss_translation_equivariant(px, py, ux, uy, yaw):
    fp = vehicle_footprint(pose(yaw=yaw), BOX)
    u = np.array([ux, uy])
    moved = VehicleFootprint(fp.corners + u)
    a = polygon_loss([px, py], fp)
    b = polygon_loss(np.array([px, py]) + u, moved)
    assert abs(a - b) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_polygon_loss_zero_exactly_on_closed_polygon(px, py):
    inside = abs(px) <= 1 and abs(py) <= 1
    assert (polygon_loss([px, py], UNIT) == 0.0) == inside
    assert point_in_footprint([px, py], UNIT) == inside


def test_nelder_mead_quadratic():
    res = nelder_mead(lambda x: (x[0] - 1) ** 2 + 10 * (x[1] + 2) ** 2, [0.0, 0.0], xtol=1e-8, ftol=1e-14)
    assert res.converged
    np.testing.assert_allclose(res.x, [1, -2], atol=1e-4)


def test_nelder_mead_iteration_cap():
    res = nelder_mead(lambda x: float(x @ x), [5.0, 5.0], xtol=1e-12, ftol=0.0, max_iter=5)
    assert not res.converged and res.n_iter == 5


def test_offset_zero_when_all_inside(rng):
    fps = np.repeat(UNIT.corners[None], 30, 0)
    pts = rng.uniform(-0.9, 0.9, (30, 2))
    off, ok = optimize_planar_offset(pts, fps)
    assert np.linalg.norm(off.as_array()) < 1e-3 and ok


def test_offset_recovers_displacement(rng):
    poses = [pose(*rng.uniform(-20, 20, 2), rng.uniform(-3, 3)) for _ in range(40)]
    fps = np.array([vehicle_footprint(p, BOX).corners for p in poses])
    pts = []
    for p, fp in zip(poses, fps):
        c, s = math.cos(p.yaw), math.sin(p.yaw)
        local = rng.uniform([-2, -1], [2, 1], (5, 2))
        pts.append(p.p_world[:2] + local @ np.array([[c, -s], [s, c]]).T + [1.0, 0.0])
    pts = np.concatenate(pts)
    fps = np.repeat(fps, 5, axis=0)
    off, _ = optimize_planar_offset(pts, fps)
    assert np.linalg.norm(off.as_array() - [-1.0, 0.0]) < 0.05


def test_offset_beats_grid_search(rng):
    # toy instance shaped like real data: targets near the footprints, displaced
    # by a common offset, with a few outliers. The vertex-distance loss is not
    # convex in general, so the oracle only holds on instances of this kind.
    yaws = rng.uniform(-3, 3, 50)
    centers = rng.uniform(-30, 30, (50, 2))
    fps = np.array([vehicle_footprint(pose(*c, y), BOX).corners for c, y in zip(centers, yaws)])
    local = rng.uniform([-2, -1], [2, 1], (50, 2))
    local[:5] *= 1.6
    rot = np.stack([np.cos(yaws), -np.sin(yaws), np.sin(yaws), np.cos(yaws)], -1).reshape(-1, 2, 2)
    pts = centers + np.einsum("nij,nj->ni", rot, local) + [0.6, -0.4]
    off, _ = optimize_planar_offset(pts, fps, PlanarOffset(), RefineParams(xtol=1e-6, ftol=1e-12))

    def total(x):
        return polygon_losses(pts + x, fps).sum()

    g = np.arange(-2, 2.0001, 0.02)
    grid_best = min(total(np.array([a, b])) for a in g for b in g)
    assert total(off.as_array()) <= grid_best + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3))
def test_offset_never_worse_than_init(seed, ix, iy):
    r = np.random.default_rng(seed)
    fps = np.repeat(UNIT.corners[None], 20, 0)
    pts = r.normal(size=(20, 2)) * 2
    init = PlanarOffset(ix, iy)
    off, _ = optimize_planar_offset(pts, fps, init)
    before = polygon_losses(pts + init.as_array(), fps).sum()
    after = polygon_losses(pts + off.as_array(), fps).sum()
    assert after <= before


def test_offset_empty_raises():
    with pytest.raises(RefinementError):
        optimize_planar_offset(np.zeros((0, 2)), np.zeros((0, 4, 2)))


def test_motion_compensate_rigid():
    a, b = pose(0, 0, 0.0), pose(10, 5, math.pi / 2, z=1.0)
    pts = np.array([[1.0, 0.0, 2.0], [0.0, 0.0, 0.0]])
    out = motion_compensate(pts, a, b)
    np.testing.assert_allclose(out, [[10, 6, 3], [10, 5, 1]], atol=1e-12)


# constructed scene: level sensor 5 m above the origin, vehicle driving a
# 12 m arc around it; every footprint corner is observed at box mid-height.

DIMS = VehicleDims(4.0, 2.0, 1.5, (1.0, 0.0, 0.5))


def scene(n=30, sensor_z=5.0):
    calib = Calibration(np.eye(3), [0.0, 0.0, sensor_z])
    t = (1_000_000 + np.arange(n) * 66_667).astype(np.int64)
    ang = np.linspace(-1.0, 1.0, n)
    xy = 12.0 * np.column_stack([np.cos(ang), np.sin(ang)])
    poses = PoseTrack(t, np.column_stack([xy, np.zeros(n)]), np.column_stack([np.zeros((n, 2)), ang + math.pi / 2]))
    obs = []
    for k in range(n):
        fp = vehicle_footprint(pose(*xy[k], ang[k] + math.pi / 2), DIMS).corners
        world = np.column_stack([fp, np.full(4, 0.5)])
        pts = world - calib.t
        obs.append(TargetCluster(int(t[k]), tuple((k, i) for i in range(4)), pts, np.ones(4), np.full(4, t[k])))
    return calib, poses, ObjectTrack(0, obs)


def test_nearest_target_and_corner():
    calib, poses, tr = scene()
    pairs = nearest_target_pairs(tr, calib, poses, DIMS)
    assert len(pairs) == 30
    # the selected target is the near-side corner nearest the sensor, matching the corner exactly
    world = pairs.p_level + calib.t
    np.testing.assert_allclose(world[:, :2], pairs.corner[:, :2], atol=1e-12)


def test_nearest_target_prefers_smaller_range():
    calib = Calibration(np.eye(3), np.zeros(3))
    poses = PoseTrack(np.array([1, 20001]), np.array([[9.0, 0, 0], [9.0, 0, 0]]), np.zeros((2, 3)))
    pts = np.array([[12.0, 0, 0], [10.0, 0, 0]])
    tr = ObjectTrack(0, [TargetCluster(1, ((0, 0), (0, 1)), pts, np.ones(2), np.array([1, 1]))])
    pairs = nearest_target_pairs(tr, calib, poses, VehicleDims(4, 2, 1.5, (2.0, 0, 0)))
    np.testing.assert_array_equal(pairs.p_level[0], [10, 0, 0])


def test_northeast_corner_selected():
    calib = Calibration(np.eye(3), [20.0, 20.0, 0.0])
    poses = PoseTrack(np.array([1]), np.zeros((1, 3)), np.zeros((1, 3)))
    pts = np.array([[-18.0, -19.0, 0.0]])
    tr = ObjectTrack(0, [TargetCluster(1, ((0, 0),), pts, np.ones(1), np.array([1]))])
    pairs = nearest_target_pairs(tr, calib, poses, BOX, gate=100)
    np.testing.assert_allclose(pairs.corner[0, :2], [2, 1])


def test_gate_drops_partial_clusters():
    calib = Calibration(np.eye(3), [20.0, 20.0, 0.0])
    poses = PoseTrack(np.array([1]), np.zeros((1, 3)), np.zeros((1, 3)))
    far = np.array([[-22.0 - 20, -21.0, 0.0]])
    tr = ObjectTrack(0, [TargetCluster(1, ((0, 0),), far, np.ones(1), np.array([1]))])
    assert len(nearest_target_pairs(tr, calib, poses, BOX)) == 0


def test_nearest_beats_centroid_scheme(canonical, canonical_run):
    calib = canonical.truth
    errs_near, errs_cent = [], []
    for tr in accept_tracks(canonical_run.tracks, calib, canonical.pose, 5.0, 5):
        pairs = nearest_target_pairs(tr, calib, canonical.pose, VehicleDims(), gate=np.inf)
        world = pairs.p_level @ calib.R_reg.T + calib.t
        errs_near.extend(np.linalg.norm(world[:, :2] - pairs.corner[:, :2], axis=1))
        for obs in tr.observations:
            p = try_pose_at(canonical.pose, obs.t)
            if p is None:
                continue
            w = calib.R @ obs.current_centroid + calib.t
            errs_cent.append(np.linalg.norm(w[:2] - p.p_world[:2]))
    assert np.mean(errs_near) < np.mean(errs_cent)


def test_correspondences_drop_short_tracks():
    calib, poses, tr = scene(n=2)
    with pytest.raises(RefinementError):
        nearest_target_correspondences([tr], calib, poses, DIMS)


def test_correspondences_plane_height():
    calib, poses, tr = scene()
    cs = nearest_target_correspondences([tr], calib, poses, DIMS, RefineParams(target_plane_z=-4.5, smooth=False))
    np.testing.assert_array_equal(cs.src[:, 2], -4.5)


def test_refine_perfect_calibration_no_harm():
    calib, poses, tr = scene()
    out, rep = refine_calibration(calib, [tr], poses, DIMS, RefineParams(smooth=False))
    assert rep.accepted and out.refined
    assert np.linalg.norm(rep.offset.as_array()) < 0.05
    assert np.linalg.norm(out.t - calib.t) < 0.05
    assert rotation_error_angle(out.R, calib.R) < 1e-6
    np.testing.assert_array_equal(out.R_level, calib.R_level)


def test_refine_corrects_shifted_translation():
    calib, poses, tr = scene()
    bad = calib.replace(t=calib.t + [0.8, -0.6, 0.0], R=rot_z(math.radians(1.0)))
    out, rep = refine_calibration(bad, [tr], poses, DIMS, RefineParams(smooth=False))
    assert np.linalg.norm(out.t - calib.t) < np.linalg.norm(bad.t - calib.t)
    assert rep.loss_after <= rep.loss_before


def test_refine_no_track_in_threshold():
    calib, poses, tr = scene()
    with pytest.raises(RefinementError):
        refine_calibration(calib.replace(t=calib.t + [50, 0, 0]), [tr], poses, DIMS)


def test_refine_improves_canonical(canonical, canonical_run):
    truth = canonical.truth
    e0 = np.linalg.norm(canonical_run.initial.t - truth.t)
    e1 = np.linalg.norm(canonical_run.calibration.t - truth.t)
    assert e1 <= e0
