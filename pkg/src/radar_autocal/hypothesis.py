"""Per-track calibration hypotheses and their consistency filtering."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cluster import dbscan
from .core import Calibration, GeometryError, PipelineError, UtmOrigin, iter_pairs, rotation_error_angle
from .groundplane import GroundPlane
from .ingest import DEFAULT_MAX_DT_US, PoseTrack, try_pose_at
from .track import SmoothedTrack

log = logging.getLogger(__name__)

COLLINEAR_RATIO = 100.0
MAX_TILT = math.radians(5.0)
ANGLE_TIE = 1e-12


class HypothesisError(PipelineError):
    code = "hypothesis"


@dataclass(frozen=True)
class Correspondence:
    t: int
    p_sensor_leveled: np.ndarray
    p_world: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.weight <= 1.0:
            raise ValueError("weight must lie in (0, 1]")


@dataclass(frozen=True)
class CorrespondenceSet:
    """Column-wise correspondences; rows line up across the arrays."""

    t: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    w: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_list(cls, corrs: Sequence[Correspondence]) -> "CorrespondenceSet":
        return cls(
            np.array([c.t for c in corrs], dtype=np.int64),
            np.array([c.p_sensor_leveled for c in corrs], dtype=float).reshape(-1, 3),
            np.array([c.p_world for c in corrs], dtype=float).reshape(-1, 3),
            np.array([c.weight for c in corrs], dtype=float),
        )

    @classmethod
    def concat(cls, sets: Sequence["CorrespondenceSet"]) -> "CorrespondenceSet":
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in ("t", "src", "dst", "w")))

    def as_list(self) -> list[Correspondence]:
        return [Correspondence(int(t), s, d, float(w)) for t, s, d, w in zip(self.t, self.src, self.dst, self.w)]


@dataclass(frozen=True)
class CalibrationHypothesis:
    track_id: int
    corrs: CorrespondenceSet
    R: np.ndarray
    t: np.ndarray
    rms_residual: float


@dataclass(frozen=True)
class HypothesisCluster:
    members: tuple[CalibrationHypothesis, ...]
    mean_t: np.ndarray
    mean_pairwise_angle: float

    @property
    def mean_rms(self) -> float:
        return float(np.mean([h.rms_residual for h in self.members]))


def build_correspondences(
    track: SmoothedTrack,
    poses: PoseTrack,
    elevation_mode: str = "zero",
    max_dt: int = DEFAULT_MAX_DT_US,
    level: np.ndarray | None = None,
    nearest: bool = False,
) -> CorrespondenceSet:
    """Pair each smoothed state with the vehicle position at its timestamp.

    ``elevation_mode`` ``zero`` sets the sensor-side height to 0; ``raw`` takes
    it from the leveled cluster center before smoothing.
    """
    if elevation_mode not in ("zero", "raw"):
        raise ValueError(f"unknown elevation mode {elevation_mode!r}")
    if elevation_mode == "raw" and track.source is None:
        raise ValueError("raw elevation needs the source object track")
    R = np.eye(3) if level is None else np.asarray(level)
    ts, src, dst = [], [], []
    for k, t in enumerate(track.t):
        pose = try_pose_at(poses, int(t), max_dt, nearest)
        if pose is None:
            continue
        z = 0.0 if elevation_mode == "zero" else float((R @ track.source.observations[k].current_centroid)[2])
        ts.append(int(t))
        src.append([track.x[k, 0], track.x[k, 1], z])
        dst.append(pose.p_world)
    if len(ts) < 3:
        raise HypothesisError(f"track {track.id}: only {len(ts)} pose-matched states, need >= 3")
    return CorrespondenceSet(np.array(ts, dtype=np.int64), np.array(src), np.array(dst), np.ones(len(ts)))


def collinearity_ratio(points: np.ndarray) -> float:
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    return float("inf") if s[1] <= 0 else float(s[0] / s[1])


def rigid_transform(src: np.ndarray, dst: np.ndarray, w: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Weighted least-squares rotation and translation with ``dst ~ R @ src + t``.

    Returns ``(R, t, rms)`` where ``rms`` is the weighted root-mean-square
    residual.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    if n < 3 or len(dst) != n:
        raise GeometryError(f"registration needs >= 3 paired points, got {n}")
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    w = w / w.sum()
    cs, cd = w @ src, w @ dst
    a, b = src - cs, dst - cd
    s_src = np.linalg.svd(a, compute_uv=False)
    if s_src[0] <= 0 or s_src[1] <= 1e-9 * s_src[0]:
        raise GeometryError("sensor-side points are collinear; rotation is undetermined")
    H = (a * w[:, None]).T @ b
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d < 0 and S[1] - S[2] <= 1e-12 * S[0]:
        raise GeometryError("reflection-forcing degenerate spectrum")
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    t = cd - R @ cs
    r = dst - src @ R.T - t
    rms = float(np.sqrt(w @ np.einsum("ij,ij->i", r, r)))
    return R, t, rms


def estimate_rigid_transform(corrs) -> tuple[np.ndarray, np.ndarray, float]:
    if not isinstance(corrs, CorrespondenceSet):
        corrs = CorrespondenceSet.from_list(corrs)
    return rigid_transform(corrs.src, corrs.dst, corrs.w)


def make_hypothesis(
    track_id: int, corrs: CorrespondenceSet, max_tilt: float = MAX_TILT
) -> CalibrationHypothesis | None:
    """Registration for one track, or None for near-straight passes.

    Sensor-side points are already leveled, so a sound registration is close
    to a pure yaw; fits tilting the up-axis by more than ``max_tilt`` come
    from under-constrained tracks and are rejected too.
    """
    ratio = collinearity_ratio(corrs.src[:, :2])
    if ratio > COLLINEAR_RATIO:
        log.warning("track %d rejected: near-collinear path (singular value ratio %.0f)", track_id, ratio)
        return None
    try:
        R, t, rms = estimate_rigid_transform(corrs)
    except GeometryError as exc:
        log.warning("track %d rejected: %s", track_id, exc)
        return None
    tilt = registration_tilt(R)
    if tilt > max_tilt:
        log.warning("track %d rejected: registration tilts the leveled frame by %.1f deg", track_id, math.degrees(tilt))
        return None
    return CalibrationHypothesis(track_id, corrs, R, t, rms)


def registration_tilt(R: np.ndarray) -> float:
    """Angle between the leveled up-axis and its image under ``R``."""
    return math.acos(max(-1.0, min(1.0, float(R[2, 2]))))


def mean_pairwise_angle(rotations: Sequence[np.ndarray]) -> float:
    pairs = list(iter_pairs(len(rotations)))
    if not pairs:
        return 0.0
    return float(np.mean([rotation_error_angle(rotations[i], rotations[j]) for i, j in pairs]))


def cluster_hypotheses(
    hyps: Sequence[CalibrationHypothesis], eps_t: float = 1.0, min_pts: int = 2
) -> list[HypothesisCluster]:
    """Group hypotheses by DBSCAN over their translations."""
    if not hyps:
        raise HypothesisError("insufficient consistent passes: no hypotheses")
    labels = dbscan(np.array([h.t for h in hyps]), eps_t, min_pts)
    out = []
    for c in range(labels.max() + 1):
        members = tuple(h for h, lab in zip(hyps, labels) if lab == c)
        out.append(
            HypothesisCluster(
                members,
                np.mean([h.t for h in members], axis=0),
                mean_pairwise_angle([h.R for h in members]),
            )
        )
    if not out:
        raise HypothesisError(
            f"insufficient consistent passes: no group of >= {min_pts} hypotheses within {eps_t} m"
        )
    return out


def select_hypothesis_cluster(clusters: Sequence[HypothesisCluster]) -> HypothesisCluster:
    """Lowest mean pairwise rotation angle; ties go to larger, then better-fitting clusters."""
    if not clusters:
        raise HypothesisError("no hypothesis clusters to select from")
    best = min(c.mean_pairwise_angle for c in clusters)
    tied = [c for c in clusters if c.mean_pairwise_angle <= best + ANGLE_TIE]
    return min(tied, key=lambda c: (-len(c.members), c.mean_rms))


def finalize_calibration(
    selected: HypothesisCluster,
    ground: GroundPlane,
    origin: UtmOrigin = UtmOrigin(),
    n_hypotheses: int = 0,
    target_height: float | None = None,
) -> Calibration:
    """Refit on the merged correspondences of the selected cluster and stack the leveling.

    With ``target_height`` given (zero elevation mode), the sensor height is
    recovered from the plane: targets sit on the fitted plane, which lies
    ``target_height`` above the localization reference point.
    """
    merged = CorrespondenceSet.concat([h.corrs for h in selected.members])
    R_reg, t, rms = estimate_rigid_transform(merged)
    if target_height is not None:
        t = t + np.array([0.0, 0.0, target_height]) - R_reg @ np.array([0.0, 0.0, ground.d])
    return Calibration(R_reg @ ground.R_level, t, ground.R_level, origin, rms, n_hypotheses)
