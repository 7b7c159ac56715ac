"""Domain types and rigid-body geometry shared by every pipeline stage.

Conventions
-----------
* Rotations are sensor->world and composed as ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
* World coordinates are UTM easting/northing shifted by a whole-meter local
  origin; altitude is kept as-is.
* Timestamps are integer microseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

ORTHO_TOL = 1e-9
GIMBAL_TOL = 1e-9


class PipelineError(Exception):
    """Base class for all recoverable pipeline failures."""

    code = "pipeline_error"


class GeometryError(PipelineError):
    code = "degenerate_geometry"


class GimbalLockError(PipelineError):
    code = "gimbal_lock"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadarTarget:
    t: int
    p_sensor: np.ndarray
    v_rad: float
    rcs: float | None = None

    def __post_init__(self):
        p = np.asarray(self.p_sensor, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)) or np.linalg.norm(p) <= 0.0:
            raise ValueError(f"invalid target position {p}")
        if self.t <= 0:
            raise ValueError("target timestamp must be positive")
        object.__setattr__(self, "p_sensor", p)

    @property
    def range(self) -> float:
        return float(np.linalg.norm(self.p_sensor))


@dataclass(frozen=True)
class RadarFrame:
    """One radar scan stored column-wise.

    ``points`` is (N, 3) in the sensor frame, ``v_rad`` and ``rcs`` are (N,).
    Missing RCS values are NaN.
    """

    t: int
    points: np.ndarray
    v_rad: np.ndarray
    rcs: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        v = np.asarray(self.v_rad, dtype=float).reshape(-1)
        if len(v) != len(pts):
            raise ValueError("points and v_rad length mismatch")
        rcs = np.full(len(v), np.nan) if self.rcs is None else np.asarray(self.rcs, dtype=float).reshape(-1)
        if len(rcs) != len(v):
            raise ValueError("rcs length mismatch")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "v_rad", v)
        object.__setattr__(self, "rcs", rcs)

    def __len__(self) -> int:
        return len(self.v_rad)

    @property
    def targets(self) -> list[RadarTarget]:
        return [
            RadarTarget(self.t, p, float(v), None if np.isnan(r) else float(r))
            for p, v, r in zip(self.points, self.v_rad, self.rcs)
        ]

    @classmethod
    def from_targets(cls, t: int, targets: Sequence[RadarTarget]) -> "RadarFrame":
        if any(tg.t != t for tg in targets):
            raise ValueError("all targets must share the frame timestamp")
        pts = np.array([tg.p_sensor for tg in targets], dtype=float).reshape(-1, 3)
        v = np.array([tg.v_rad for tg in targets], dtype=float)
        rcs = np.array([np.nan if tg.rcs is None else tg.rcs for tg in targets], dtype=float)
        return cls(t, pts, v, rcs)

    def subset(self, mask: np.ndarray) -> "RadarFrame":
        return RadarFrame(self.t, self.points[mask], self.v_rad[mask], self.rcs[mask])


@dataclass(frozen=True)
class VehiclePose:
    t: int
    p_world: np.ndarray
    rpy: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p_world", np.asarray(self.p_world, dtype=float).reshape(3))
        object.__setattr__(self, "rpy", np.asarray(self.rpy, dtype=float).reshape(3))

    @property
    def yaw(self) -> float:
        return float(self.rpy[2])


@dataclass(frozen=True)
class VehicleDims:
    """Bounding box of the calibration vehicle.

    ``ref_offset`` points from the localization reference (rear-axle center)
    to the geometric box center, in the vehicle frame.
    """

    length: float = 4.7
    width: float = 1.9
    height: float = 1.5
    ref_offset: tuple[float, float, float] = (1.4, 0.0, 0.45)

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("vehicle dimensions must be positive")
        object.__setattr__(self, "ref_offset", tuple(float(v) for v in self.ref_offset))

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.length, self.width)


@dataclass(frozen=True)
class UtmOrigin:
    zone: str = ""
    easting: float = 0.0
    northing: float = 0.0


@dataclass(frozen=True)
class Calibration:
    """Sensor->world rigid transform, ``p_world = R @ p_sensor + t``.

    ``R`` is the registration rotation composed with the leveling rotation,
    ``R = R_reg @ R_level``.
    """

    R: np.ndarray
    t: np.ndarray
    R_level: np.ndarray = field(default_factory=lambda: np.eye(3))
    origin: UtmOrigin = field(default_factory=UtmOrigin)
    residual_rms: float = float("nan")
    n_hypotheses: int = 0
    refined: bool = False

    def __post_init__(self):
        object.__setattr__(self, "R", as_rotation(self.R))
        object.__setattr__(self, "R_level", as_rotation(self.R_level))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @property
    def R_reg(self) -> np.ndarray:
        return self.R @ self.R_level.T

    @property
    def rpy(self) -> tuple[float, float, float]:
        return rotation_to_euler(self.R)

    @property
    def sensor_position(self) -> np.ndarray:
        return self.t

    def replace(self, **changes) -> "Calibration":
        from dataclasses import replace

        return replace(self, **changes)


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(b: float) -> np.ndarray:
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(g: float) -> np.ndarray:
    c, s = math.cos(g), math.sin(g)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.max(np.abs(R.T @ R - np.eye(3))) < tol and abs(np.linalg.det(R) - 1.0) < tol)


def as_rotation(R) -> np.ndarray:
    R = np.array(R, dtype=float)
    if not is_rotation(R):
        raise ValueError("matrix is not a proper rotation")
    return R


def euler_to_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Closed-form ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    ca, sa = math.cos(roll), math.sin(roll)
    cb, sb = math.cos(pitch), math.sin(pitch)
    cg, sg = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
            [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
            [-sb, cb * sa, cb * ca],
        ]
    )


def rotation_to_euler(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`euler_to_rotation` away from gimbal lock."""
    R = np.asarray(R, dtype=float)
    if abs(R[2, 0]) >= 1.0 - GIMBAL_TOL:
        raise GimbalLockError("pitch at +-90 deg, roll and yaw are not separable")
    pitch = -math.asin(R[2, 0])
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return roll, pitch, yaw


def rotation_error_angle(R_i: np.ndarray, R_j: np.ndarray) -> float:
    """Angle of the relative rotation ``R_j.T @ R_i`` in [0, pi]."""
    c = (np.trace(np.asarray(R_j).T @ np.asarray(R_i)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quaternion_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def apply_calibration(c: Calibration, p_sensor) -> np.ndarray:
    """Map sensor-frame point(s) to world; accepts (3,) or (N, 3)."""
    p = np.asarray(p_sensor, dtype=float)
    return p @ c.R.T + c.t


def invert_calibration(c: Calibration, p_world) -> np.ndarray:
    p = np.asarray(p_world, dtype=float)
    return (p - c.t) @ c.R


def iter_pairs(n: int) -> Iterator[tuple[int, int]]:
    for i in range(n):
        for j in range(i + 1, n):
            yield i, j
