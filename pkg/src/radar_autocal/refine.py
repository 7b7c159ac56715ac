"""Second-pass refinement with nearest-target correspondences and a
polygon-containment offset search."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cluster import ObjectTrack
from .core import Calibration, GeometryError, PipelineError, VehicleDims, VehiclePose
from .hypothesis import CorrespondenceSet, rigid_transform
from .ingest import DEFAULT_MAX_DT_US, PoseTrack, try_pose_at
from .track import NoiseSpec, TrackingError, ukf_rts

log = logging.getLogger(__name__)

BOUNDARY_SLACK = 1e-9


class RefinementError(PipelineError):
    code = "refinement"


@dataclass(frozen=True)
class VehicleFootprint:
    """Ground polygon of the vehicle, corners counter-clockwise."""

    corners: np.ndarray
    t: int = 0

    @property
    def area(self) -> float:
        return signed_area(self.corners)


@dataclass(frozen=True)
class PlanarOffset:
    dx: float = 0.0
    dy: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy])


@dataclass(frozen=True)
class NelderMeadResult:
    x: np.ndarray
    fun: float
    n_iter: int
    converged: bool


@dataclass(frozen=True)
class RefineParams:
    reject_threshold: float = 5.0
    min_length: int = 5
    iterations: int = 3
    pair_gate: float | None = None
    target_plane_z: float | None = None
    smooth: bool = True
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    max_dt: int = DEFAULT_MAX_DT_US
    edge_distance: bool = False
    simplex_step: float = 0.5
    xtol: float = 1e-3
    ftol: float = 1e-6
    max_iter: int = 500
    restarts: int = 10


def signed_area(corners: np.ndarray) -> float:
    x, y = corners[:, 0], corners[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def box_center(pose: VehiclePose, dims: VehicleDims) -> np.ndarray:
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    ox, oy, oz = dims.ref_offset
    return pose.p_world + np.array([c * ox - s * oy, s * ox + c * oy, oz])


def vehicle_footprint(pose: VehiclePose, dims: VehicleDims) -> VehicleFootprint:
    center = box_center(pose, dims)[:2]
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    hl, hw = dims.length / 2, dims.width / 2
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return VehicleFootprint(center + local @ rot.T, pose.t)


def _inside(points: np.ndarray, corners: np.ndarray, slack: float = BOUNDARY_SLACK) -> np.ndarray:
    """Vectorised closed point-in-convex-polygon test; points (N, 2), corners (N, 4, 2)."""
    a = corners
    e = np.roll(a, -1, axis=1) - a
    rel = points[:, None, :] - a
    cross = e[..., 0] * rel[..., 1] - e[..., 1] * rel[..., 0]
    return np.all(cross >= -slack * np.linalg.norm(e, axis=-1), axis=1)


def _segment_distance(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    a = corners
    e = np.roll(a, -1, axis=1) - a
    rel = points[:, None, :] - a
    u = np.clip(np.einsum("nkd,nkd->nk", rel, e) / np.einsum("nkd,nkd->nk", e, e), 0.0, 1.0)
    return np.linalg.norm(rel - u[..., None] * e, axis=-1).min(axis=1)


def polygon_losses(points, corners, edge_distance: bool = False) -> np.ndarray:
    """Per-point loss: 0 inside (boundary included), else distance to the
    nearest vertex (or nearest edge with ``edge_distance``)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    cs = np.asarray(corners, dtype=float).reshape(-1, 4, 2)
    inside = _inside(pts, cs)
    if edge_distance:
        d = _segment_distance(pts, cs)
    else:
        d = np.linalg.norm(cs - pts[:, None, :], axis=-1).min(axis=1)
    return np.where(inside, 0.0, d)


def point_in_footprint(p, fp: VehicleFootprint) -> bool:
    return bool(_inside(np.asarray(p, dtype=float).reshape(1, 2), fp.corners[None])[0])


def polygon_loss(p, fp: VehicleFootprint, edge_distance: bool = False) -> float:
    return float(polygon_losses(np.asarray(p).reshape(1, 2), fp.corners[None], edge_distance)[0])


def nelder_mead(
    f: Callable[[np.ndarray], float],
    x0,
    step: float = 0.5,
    xtol: float = 1e-3,
    ftol: float = 1e-6,
    max_iter: int = 500,
    alpha: float = 1.0,
    gamma: float = 2.0,
    rho: float = 0.5,
    sigma: float = 0.5,
) -> NelderMeadResult:
    """Downhill simplex minimisation.

    Stops when the simplex diameter drops below ``xtol`` or the spread of
    vertex values below ``ftol``.
    """
    x0 = np.asarray(x0, dtype=float)
    n = len(x0)
    simplex = [x0] + [x0 + step * np.eye(n)[i] for i in range(n)]
    values = [f(x) for x in simplex]
    it = 0
    converged = False
    while True:
        order = np.argsort(values, kind="stable")
        simplex = [simplex[i] for i in order]
        values = [values[i] for i in order]
        diam = max(np.linalg.norm(a - b) for a in simplex for b in simplex)
        if diam < xtol or values[-1] - values[0] < ftol:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        centroid = np.mean(simplex[:-1], axis=0)
        worst = simplex[-1]
        xr = centroid + alpha * (centroid - worst)
        fr = f(xr)
        if values[0] <= fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[0]:
            xe = centroid + gamma * (xr - centroid)
            fe = f(xe)
            simplex[-1], values[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < values[-1]:
            xc = centroid + rho * (xr - centroid)
            fc = f(xc)
            if fc <= fr:
                simplex[-1], values[-1] = xc, fc
                continue
        else:
            xc = centroid + rho * (worst - centroid)
            fc = f(xc)
            if fc < values[-1]:
                simplex[-1], values[-1] = xc, fc
                continue
        best = simplex[0]
        simplex = [best] + [best + sigma * (x - best) for x in simplex[1:]]
        values = [values[0]] + [f(x) for x in simplex[1:]]
    return NelderMeadResult(simplex[0], values[0], it, converged)


def optimize_planar_offset(
    points,
    corners,
    init: PlanarOffset = PlanarOffset(),
    params: RefineParams = RefineParams(),
) -> tuple[PlanarOffset, bool]:
    """World-frame 2D shift minimising the summed polygon loss.

    Returns the offset and whether the simplex converged before the iteration
    cap (the best vertex is returned either way).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    cs = np.asarray(corners, dtype=float).reshape(-1, 4, 2)
    if len(pts) == 0:
        raise RefinementError("planar offset needs at least one target/footprint pair")

    def total(x):
        return float(polygon_losses(pts + x, cs, params.edge_distance).sum())

    # the vertex-distance loss jumps where a point crosses an edge, which can
    # collapse the simplex early; restarting from the best vertex escapes that
    x0 = init.as_array()
    x, fx = x0, total(x0)
    converged = True
    for _ in range(params.restarts + 1):
        res = nelder_mead(total, x, params.simplex_step, params.xtol, params.ftol, params.max_iter)
        converged = res.converged
        if not converged:
            log.warning("planar offset search hit the %d-iteration cap", params.max_iter)
        if res.fun > fx - params.ftol:
            if res.fun < fx:
                x, fx = res.x, res.fun
            break
        x, fx = res.x, res.fun
    return PlanarOffset(float(x[0]), float(x[1])), converged


# ---------------------------------------------------------------------------
# second pass
# ---------------------------------------------------------------------------


@dataclass
class NearestPairs:
    """Per-observation nearest-target data for one track (rows aligned)."""

    track_id: int
    t: np.ndarray
    p_level: np.ndarray  # selected target, leveled sensor frame
    corner: np.ndarray  # nearest footprint corner, world, at box mid-height
    offset_level: np.ndarray  # corner - localization point, leveled sensor frame

    def __len__(self) -> int:
        return len(self.t)


def track_world_offset(track: ObjectTrack, calib: Calibration, poses: PoseTrack, max_dt: int = DEFAULT_MAX_DT_US) -> float:
    """Mean horizontal distance between the track's world centers and the vehicle position."""
    d = []
    for obs in track.observations:
        pose = try_pose_at(poses, obs.t, max_dt)
        if pose is None:
            continue
        w = calib.R @ obs.current_centroid + calib.t
        d.append(np.linalg.norm(w[:2] - pose.p_world[:2]))
    return float(np.mean(d)) if d else float("inf")


def accept_tracks(
    tracks: Sequence[ObjectTrack],
    calib: Calibration,
    poses: PoseTrack,
    threshold: float = 5.0,
    min_length: int = 1,
    max_dt: int = DEFAULT_MAX_DT_US,
) -> list[ObjectTrack]:
    return [
        tr
        for tr in tracks
        if len(tr) >= min_length and track_world_offset(tr, calib, poses, max_dt) < threshold
    ]


def motion_compensate(world: np.ndarray, src: VehiclePose, dst: VehiclePose) -> np.ndarray:
    """Carry world points rigidly with the vehicle from pose ``src`` to pose ``dst``."""
    d = dst.yaw - src.yaw
    c, s = math.cos(d), math.sin(d)
    rel = world[..., :2] - src.p_world[:2]
    out = np.array(world, dtype=float, copy=True)
    out[..., 0] = dst.p_world[0] + c * rel[..., 0] - s * rel[..., 1]
    out[..., 1] = dst.p_world[1] + s * rel[..., 0] + c * rel[..., 1]
    out[..., 2] += dst.p_world[2] - src.p_world[2]
    return out


def nearest_target_pairs(
    track: ObjectTrack,
    calib: Calibration,
    poses: PoseTrack,
    dims: VehicleDims,
    max_dt: int = DEFAULT_MAX_DT_US,
    gate: float | None = None,
) -> NearestPairs:
    """For each observation: the cluster member nearest (in 2D) to the sensor,
    and the footprint corner nearest to the sensor.

    Members from older frames of the window are first carried along with the
    vehicle's logged motion to the observation time. Pairs farther apart than
    ``gate`` (default half the vehicle length) are dropped; they come from
    clusters that hold only part of the vehicle.
    """
    gate = dims.length / 2 if gate is None else gate
    sensor_xy = calib.t[:2]
    R_reg = calib.R_reg
    ts, pl, cw, ol = [], [], [], []
    for obs in track.observations:
        pose = try_pose_at(poses, obs.t, max_dt)
        if pose is None or len(obs.points) == 0:
            continue
        world = obs.points @ calib.R.T + calib.t
        moved = world.copy()
        usable = np.ones(len(world), dtype=bool)
        for i, tm in enumerate(obs.member_t):
            if tm == obs.t:
                continue
            src = try_pose_at(poses, int(tm), max_dt)
            if src is None:
                usable[i] = False
            else:
                moved[i] = motion_compensate(world[i], src, pose)
        if not usable.any():
            continue
        dist = np.where(usable, np.linalg.norm(moved[:, :2] - sensor_xy, axis=1), np.inf)
        k = int(np.argmin(dist))
        corners = vehicle_footprint(pose, dims).corners
        j = int(np.argmin(np.linalg.norm(corners - sensor_xy, axis=1)))
        corner = np.array([corners[j, 0], corners[j, 1], pose.p_world[2] + dims.ref_offset[2]])
        if np.linalg.norm(moved[k, :2] - corner[:2]) > gate:
            continue
        ts.append(obs.t)
        pl.append(calib.R_level @ obs.points[k] + R_reg.T @ (moved[k] - world[k]))
        cw.append(corner)
        ol.append(R_reg.T @ (corner - pose.p_world))
    shape = (-1, 3)
    return NearestPairs(
        track.id,
        np.array(ts, dtype=np.int64),
        np.array(pl, dtype=float).reshape(shape),
        np.array(cw, dtype=float).reshape(shape),
        np.array(ol, dtype=float).reshape(shape),
    )


def nearest_target_correspondences(
    tracks: Sequence[ObjectTrack],
    calib: Calibration,
    poses: PoseTrack,
    dims: VehicleDims,
    params: RefineParams = RefineParams(),
) -> CorrespondenceSet:
    """Nearest-target / nearest-corner correspondences over the given tracks.

    With ``params.smooth`` the sensor-side points are re-tracked: the
    corner-to-localization offset is removed, the resulting reference-point
    path is smoothed, and the offset is added back. Tracks left with fewer
    than 3 pairs are dropped.
    """
    sets = []
    for tr in tracks:
        pairs = nearest_target_pairs(tr, calib, poses, dims, params.max_dt, params.pair_gate)
        if len(pairs) < 3:
            continue
        src = pairs.p_level.copy()
        if params.target_plane_z is not None:
            src[:, 2] = params.target_plane_z
        if params.smooth:
            if len(pairs) < params.min_length:
                continue
            ref = pairs.p_level[:, :2] - pairs.offset_level[:, :2]
            try:
                _, _, xs, _ = ukf_rts(ref, pairs.t, params.noise)
            except TrackingError as exc:
                log.warning("track %d skipped in refinement: %s", tr.id, exc)
                continue
            src[:, :2] = xs[:, :2] + pairs.offset_level[:, :2]
        sets.append(CorrespondenceSet(pairs.t, src, pairs.corner, np.ones(len(pairs))))
    if not sets:
        raise RefinementError("no track yields nearest-target correspondences")
    return CorrespondenceSet.concat(sets)


def containment_pairs(
    tracks: Sequence[ObjectTrack], calib: Calibration, poses: PoseTrack, dims: VehicleDims, max_dt: int = DEFAULT_MAX_DT_US
) -> tuple[np.ndarray, np.ndarray]:
    """World 2D positions of the tracks' newest-frame targets and the matching footprints."""
    pts, cs = [], []
    for tr in tracks:
        for obs in tr.observations:
            mask = obs.current_mask
            if not mask.any():
                continue
            pose = try_pose_at(poses, obs.t, max_dt)
            if pose is None:
                continue
            corners = vehicle_footprint(pose, dims).corners
            w = obs.points[mask] @ calib.R.T + calib.t
            pts.append(w[:, :2])
            cs.append(np.repeat(corners[None], len(w), axis=0))
    if not pts:
        return np.zeros((0, 2)), np.zeros((0, 4, 2))
    return np.concatenate(pts), np.concatenate(cs)


def mean_containment_loss(tracks, calib, poses, dims, params: RefineParams = RefineParams()) -> float:
    pts, cs = containment_pairs(tracks, calib, poses, dims, params.max_dt)
    if len(pts) == 0:
        return float("inf")
    return float(polygon_losses(pts, cs, params.edge_distance).mean())


@dataclass
class RefineReport:
    iterations: int = 0
    n_tracks: int = 0
    n_pairs: int = 0
    offset: PlanarOffset = field(default_factory=PlanarOffset)
    offset_converged: bool = True
    loss_before: float = float("nan")
    loss_after: float = float("nan")
    accepted: bool = False


def refine_calibration(
    calib: Calibration,
    tracks: Sequence[ObjectTrack],
    poses: PoseTrack,
    dims: VehicleDims,
    params: RefineParams = RefineParams(),
) -> tuple[Calibration, RefineReport]:
    """Re-register on nearest-target correspondences, then shift the
    translation in x/y so that most targets fall inside the vehicle footprint.

    The leveling rotation is kept. If the mean containment loss ends up higher
    than before, the input calibration is returned and the report says so.
    """
    report = RefineReport()
    base_tracks = accept_tracks(tracks, calib, poses, params.reject_threshold, params.min_length, params.max_dt)
    if not base_tracks:
        raise RefinementError("no track lies within the rejection threshold of the vehicle")
    report.loss_before = mean_containment_loss(base_tracks, calib, poses, dims, params)

    cur = calib
    for it in range(params.iterations):
        used = accept_tracks(tracks, cur, poses, params.reject_threshold, params.min_length, params.max_dt)
        if not used:
            break
        corrs = nearest_target_correspondences(used, cur, poses, dims, params)
        try:
            R_reg, t, rms = rigid_transform(corrs.src, corrs.dst, corrs.w)
        except GeometryError as exc:
            raise RefinementError(f"nearest-target registration failed: {exc}") from exc
        nxt = cur.replace(R=R_reg @ cur.R_level, t=t, residual_rms=rms)
        shift = float(np.linalg.norm(nxt.t - cur.t))
        cur = nxt
        report.iterations = it + 1
        report.n_tracks, report.n_pairs = len(used), len(corrs)
        if shift < 1e-9:
            break

    used = accept_tracks(tracks, cur, poses, params.reject_threshold, params.min_length, params.max_dt)
    pts, cs = containment_pairs(used, cur, poses, dims, params.max_dt)
    if len(pts):
        offset, ok = optimize_planar_offset(pts, cs, PlanarOffset(), params)
        report.offset, report.offset_converged = offset, ok
        cur = cur.replace(t=cur.t + np.array([offset.dx, offset.dy, 0.0]))

    report.loss_after = mean_containment_loss(base_tracks, cur, poses, dims, params)
    if report.loss_after > report.loss_before:
        log.warning(
            "refinement raised the containment loss (%.3f -> %.3f); keeping the initial calibration",
            report.loss_before,
            report.loss_after,
        )
        return calib.replace(refined=False), report
    report.accepted = True
    return cur.replace(refined=True), report
