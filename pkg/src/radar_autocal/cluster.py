"""Moving-target filtering, velocity-augmented DBSCAN and track association."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .core import PipelineError, RadarFrame, RadarTarget

KMH = 1.0 / 3.6
NOISE = -1


class ClusteringError(PipelineError):
    code = "clustering"


@dataclass(frozen=True)
class ClusterParams:
    v_min: float = 0.1 * KMH
    eps: float = 2.5
    min_pts: int = 3
    lambda_v: float = 1.0
    window: int = 3

    def __post_init__(self):
        if self.eps <= 0 or self.min_pts < 1 or self.window < 1 or self.lambda_v < 0 or self.v_min < 0:
            raise ValueError(f"invalid cluster parameters {self}")


@dataclass(frozen=True)
class TargetCluster:
    """Targets grouped over one sliding window.

    ``members`` are (frame index, target index) pairs; ``points``, ``v_rad`` and
    ``member_t`` are the matching sensor-frame values.
    """

    t: int
    members: tuple[tuple[int, int], ...]
    points: np.ndarray
    v_rad: np.ndarray
    member_t: np.ndarray

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def mean_v_rad(self) -> float:
        return float(self.v_rad.mean())

    @property
    def current_mask(self) -> np.ndarray:
        return self.member_t == self.t

    @property
    def current_centroid(self) -> np.ndarray:
        """Mean of the members seen in the newest frame (all members if none)."""
        m = self.current_mask
        return self.points[m].mean(axis=0) if m.any() else self.centroid

    @property
    def frame_index(self) -> int:
        return max(f for f, _ in self.members)


@dataclass
class ObjectTrack:
    id: int
    observations: list[TargetCluster] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def times(self) -> np.ndarray:
        return np.array([o.t for o in self.observations], dtype=np.int64)

    @property
    def last(self) -> TargetCluster:
        return self.observations[-1]


def filter_moving(frame: RadarFrame, v_min: float) -> RadarFrame:
    if v_min < 0:
        raise ValueError("v_min must be non-negative")
    return frame.subset(np.abs(frame.v_rad) >= v_min)


def augmented_distance(a: RadarTarget, b: RadarTarget, lambda_v: float) -> float:
    d = a.p_sensor - b.p_sensor
    dv = lambda_v * (a.v_rad - b.v_rad)
    return float(np.sqrt(d @ d + dv * dv))


def augment(points: np.ndarray, v_rad: np.ndarray, lambda_v: float) -> np.ndarray:
    """Embed targets so that Euclidean distance equals :func:`augmented_distance`."""
    return np.column_stack([np.asarray(points, dtype=float).reshape(-1, 3), lambda_v * np.asarray(v_rad, dtype=float)])


def dbscan(X: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Label points with cluster ids 0..k-1 (``-1`` for noise).

    Neighborhoods are closed balls and include the point itself. Points are
    visited in index order, so a border point reachable from two clusters goes
    to the one discovered first.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return labels
    tree = cKDTree(X)
    neighbors = tree.query_ball_point(X, r=eps)
    visited = np.zeros(n, dtype=bool)
    cid = 0
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        if len(neighbors[i]) < min_pts:
            continue
        labels[i] = cid
        queue = deque(neighbors[i])
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cid
            if visited[j]:
                continue
            visited[j] = True
            if len(neighbors[j]) >= min_pts:
                queue.extend(neighbors[j])
        cid += 1
    return labels


def cluster_window(
    frames: Sequence[RadarFrame],
    params: ClusterParams,
    frame_indices: Sequence[int] | None = None,
) -> list[TargetCluster]:
    """Cluster the union of targets of the (pre-filtered) frames in one window."""
    if not 1 <= len(frames) <= params.window:
        raise ValueError(f"window must hold 1..{params.window} frames, got {len(frames)}")
    if frame_indices is None:
        frame_indices = range(len(frames))
    pts, vs, ts, refs = [], [], [], []
    for fi, fr in zip(frame_indices, frames):
        pts.append(fr.points)
        vs.append(fr.v_rad)
        ts.append(np.full(len(fr), fr.t, dtype=np.int64))
        refs.extend((int(fi), k) for k in range(len(fr)))
    if not refs:
        return []
    pts = np.concatenate(pts)
    vs = np.concatenate(vs)
    ts = np.concatenate(ts)
    labels = dbscan(augment(pts, vs, params.lambda_v), params.eps, params.min_pts)
    t_new = max(fr.t for fr in frames)
    out = []
    for c in range(labels.max() + 1):
        idx = np.flatnonzero(labels == c)
        if len(idx) < params.min_pts:
            continue
        out.append(TargetCluster(t_new, tuple(refs[i] for i in idx), pts[idx], vs[idx], ts[idx]))
    return out


def cluster_frames(frames: Sequence[RadarFrame], params: ClusterParams) -> list[tuple[int, list[TargetCluster]]]:
    """Sliding-window clustering: one cluster set per radar frame."""
    moving = [filter_moving(f, params.v_min) for f in frames]
    out = []
    for k in range(len(moving)):
        lo = max(0, k - params.window + 1)
        out.append((k, cluster_window(moving[lo : k + 1], params, range(lo, k + 1))))
    return out


def hungarian(cost: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost assignment of a (possibly rectangular) cost matrix."""
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return [], 0.0
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist())), float(cost[rows, cols].sum())


def gated_assignment(cost: np.ndarray, gate: float) -> list[tuple[int, int]]:
    """Assignment where rows/cols may stay unmatched at ``gate`` cost each.

    The matrix is padded to (n+m) square with dummy entries at ``gate`` so a
    real pair is only chosen when it beats leaving both ends unassigned.
    """
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    big = gate * (n + m + 1) * 10.0 + 1.0
    full = np.full((n + m, m + n), 0.0)
    full[:n, :m] = np.where(cost <= gate, cost, big)
    full[:n, m:] = np.where(np.eye(n, dtype=bool), gate, big)
    full[n:, :m] = np.where(np.eye(m, dtype=bool), gate, big)
    pairs, _ = hungarian(full)
    return [(i, j) for i, j in pairs if i < n and j < m and cost[i, j] <= gate]


def _assoc_xy(c: TargetCluster, level: np.ndarray | None) -> np.ndarray:
    p = c.centroid
    return (level @ p)[:2] if level is not None else p


def associate_tracks(
    steps: Sequence[tuple[int, Sequence[TargetCluster]]],
    gate: float = 3.0,
    level: np.ndarray | None = None,
    max_gap: int = 3,
) -> list[ObjectTrack]:
    """Fold time-ordered cluster sets into object tracks.

    Identities are first propagated through targets shared between
    overlapping windows; clusters without a unique propagated identity are
    matched to the remaining live tracks by gated Hungarian assignment on
    centroid distance. Unmatched clusters start new tracks. With ``level``
    given, distances are taken in the leveled 2D plane.
    """
    tracks: list[ObjectTrack] = []
    last_frame: dict[int, int] = {}
    for k, clusters in steps:
        live = [tr for tr in tracks if k - last_frame[tr.id] <= max_gap and last_frame[tr.id] < k]
        if not clusters:
            continue
        cxy = [_assoc_xy(c, level) for c in clusters]
        txy = [_assoc_xy(tr.last, level) for tr in live]
        dist = np.array([[np.linalg.norm(a - b) for b in txy] for a in cxy]).reshape(len(clusters), len(live))

        proposal: dict[int, int] = {}
        for ci, c in enumerate(clusters):
            mem = set(c.members)
            best, best_key = None, None
            for ti, tr in enumerate(live):
                shared = len(mem.intersection(tr.last.members))
                if shared == 0:
                    continue
                key = (-shared, dist[ci, ti])
                if best_key is None or key < best_key:
                    best, best_key = ti, key
            if best is not None:
                proposal[ci] = best
        claims: dict[int, list[int]] = {}
        for ci, ti in proposal.items():
            claims.setdefault(ti, []).append(ci)

        assigned: dict[int, int] = {}
        for ti, cis in claims.items():
            if len(cis) == 1 and dist[cis[0], ti] <= gate:
                assigned[cis[0]] = ti
        free_c = [ci for ci in range(len(clusters)) if ci not in assigned]
        free_t = [ti for ti in range(len(live)) if ti not in assigned.values()]
        if free_c and free_t:
            sub = dist[np.ix_(free_c, free_t)]
            for a, b in gated_assignment(sub, gate):
                assigned[free_c[a]] = free_t[b]

        for ci, c in enumerate(clusters):
            if ci in assigned:
                tr = live[assigned[ci]]
            else:
                tr = ObjectTrack(len(tracks))
                tracks.append(tr)
            tr.observations.append(c)
            last_frame[tr.id] = k
    return tracks
