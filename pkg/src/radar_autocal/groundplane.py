"""Road-plane estimation and the roll/pitch leveling rotation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import GeometryError, PipelineError, rot_x, rot_y

E_Z = np.array([0.0, 0.0, 1.0])
RANK_TOL = 1e-9


class GroundPlaneError(PipelineError):
    code = "ground_plane"


@dataclass(frozen=True)
class GroundPlane:
    """Plane ``n . p = d`` in the sensor frame with ``n_z > 0``."""

    n: np.ndarray
    d: float
    R_level: np.ndarray
    n_points: int = 0

    @property
    def roll(self) -> float:
        return math.atan2(self.n[1], self.n[2])

    @property
    def pitch(self) -> float:
        return -math.asin(max(-1.0, min(1.0, self.n[0])))


def density_filter(points, radius: float = 1.0, keep_fraction: float = 0.2) -> np.ndarray:
    """Keep points whose neighbor count within ``radius`` is at least
    ``keep_fraction`` of the maximum count (the point itself included)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise GroundPlaneError("density filter on empty point set")
    if radius <= 0 or not 0 < keep_fraction < 1:
        raise ValueError("radius must be > 0 and keep_fraction in (0, 1)")
    counts = np.asarray(cKDTree(pts).query_ball_point(pts, r=radius, return_length=True))
    return pts[counts >= keep_fraction * counts.max()]


def fit_plane(points) -> tuple[np.ndarray, float]:
    """Least-squares plane through ``points``; returns (unit normal, offset)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise GeometryError(f"plane fit needs >= 3 points, got {len(pts)}")
    c = pts.mean(axis=0)
    # columns are points, so the left singular vectors span the point directions
    U, S, _ = np.linalg.svd((pts - c).T, full_matrices=False)
    if S[0] <= 0 or S[1] <= RANK_TOL * S[0]:
        raise GeometryError("points are collinear or coincident; plane is undefined")
    n = U[:, 2]
    if n[2] < 0:
        n = -n
    n = n / np.linalg.norm(n)
    return n, float(n @ c)


def leveling_rotation(n) -> np.ndarray:
    """Rotation ``Ry(pitch) @ Rx(roll)`` taking ``n`` onto +z.

    ``n`` must be a unit vector with positive z. The result carries no yaw, so
    roll and pitch read off directly: ``n = (-sin p, sin r cos p, cos r cos p)``.
    """
    n = np.asarray(n, dtype=float)
    roll = math.atan2(n[1], n[2])
    pitch = -math.asin(max(-1.0, min(1.0, n[0])))
    return rot_y(pitch) @ rot_x(roll)


def estimate_ground(points, radius: float = 1.0, keep_fraction: float = 0.2) -> GroundPlane:
    dense = density_filter(points, radius, keep_fraction)
    n, d = fit_plane(dense)
    return GroundPlane(n, d, leveling_rotation(n), len(dense))
