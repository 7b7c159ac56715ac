"""PNG figures for evaluation runs (off-screen Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cluster import ObjectTrack  # noqa: E402
from .core import Calibration, VehicleDims  # noqa: E402
from .evaluation import Metrics  # noqa: E402
from .ingest import PoseTrack, try_pose_at  # noqa: E402
from .refine import vehicle_footprint  # noqa: E402


def _binned_mean(x: np.ndarray, y: np.ndarray, width: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
    if len(x) == 0:
        return np.zeros(0), np.zeros(0)
    edges = np.arange(np.floor(x.min() / width) * width, x.max() + width, width)
    idx = np.digitize(x, edges)
    centers, means = [], []
    for k in np.unique(idx):
        sel = idx == k
        centers.append(edges[k - 1] + width / 2)
        means.append(y[sel].mean())
    return np.array(centers), np.array(means)


def plot_outlier_error(metrics: Metrics, path) -> Path:
    """Outside-target distance to the footprint against sensor range."""
    rows = [r for r in metrics.per_target if not r.inside]
    x = np.array([r.range_m for r in rows])
    y = np.array([r.loss_m for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(x, y, s=4, alpha=0.3, label="outside targets")
    bx, by = _binned_mean(x, y)
    ax.plot(bx, by, "r-o", ms=3, label="5 m bin mean")
    ax.set_xlabel("range to sensor [m]")
    ax.set_ylabel("distance to footprint [m]")
    ax.set_title(f"outlier error, mean {metrics.delta_op:.2f} m")
    ax.legend()
    return _save(fig, path)


def plot_corner_error(metrics: Metrics, dims: VehicleDims, path) -> Path:
    """Nearest-target to nearest-corner distance against range, with the half-diagonal for scale."""
    rows = [r for r in metrics.per_target if r.delta_p_m is not None]
    x = np.array([r.range_m for r in rows])
    y = np.array([r.delta_p_m for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(x, y, s=4, alpha=0.3, label="per cluster")
    bx, by = _binned_mean(x, y)
    ax.plot(bx, by, "r-o", ms=3, label="5 m bin mean")
    ax.axhline(dims.half_diagonal, color="k", ls="--", label="vehicle half-diagonal")
    ax.set_xlabel("range to sensor [m]")
    ax.set_ylabel("nearest target to corner [m]")
    ax.legend()
    return _save(fig, path)


def plot_bev(
    tracks: Sequence[ObjectTrack],
    calib: Calibration,
    poses: PoseTrack,
    dims: VehicleDims,
    path,
    every: int = 10,
) -> Path:
    """Top view of calibrated targets and every ``every``-th vehicle footprint."""
    fig, ax = plt.subplots(figsize=(6, 6))
    for tr in tracks:
        for k, obs in enumerate(tr.observations):
            m = obs.current_mask
            w = obs.points[m] @ calib.R.T + calib.t
            ax.plot(w[:, 0], w[:, 1], ".", ms=2, color="tab:blue")
            if k % every:
                continue
            pose = try_pose_at(poses, obs.t)
            if pose is None:
                continue
            c = vehicle_footprint(pose, dims).corners
            ax.fill(c[:, 0], c[:, 1], fill=False, ec="tab:orange", lw=0.8)
    ax.plot(*calib.t[:2], "k^", ms=8, label="sensor")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend()
    return _save(fig, path)


def _save(fig, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return p
