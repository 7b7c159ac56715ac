"""Footprint-containment metrics for a calibration on a held-out recording."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cluster import ObjectTrack
from .core import Calibration, PipelineError, VehicleDims
from .ingest import DEFAULT_MAX_DT_US, PoseTrack, try_pose_at
from .refine import polygon_losses, track_world_offset, vehicle_footprint

DIAGNOSTICS_HEADER = ["t_us", "track_id", "range_m", "inside", "loss_m", "delta_p_m"]


class EvaluationError(PipelineError):
    code = "evaluation"


@dataclass(frozen=True)
class TargetDiagnostic:
    t: int
    track_id: int
    range_m: float
    inside: bool
    loss_m: float
    delta_p_m: float | None = None


@dataclass
class Metrics:
    r_i: float
    delta_op: float
    delta_p: float
    n_targets: int
    n_inliers: int
    per_target: list[TargetDiagnostic] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "r_i_pct": self.r_i,
            "delta_op_m": self.delta_op,
            "delta_p_m": self.delta_p,
            "n_targets": self.n_targets,
            "n_inliers": self.n_inliers,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def diagnostics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DIAGNOSTICS_HEADER)
        for d in self.per_target:
            dp = "" if d.delta_p_m is None else repr(d.delta_p_m)
            w.writerow([d.t, d.track_id, repr(d.range_m), int(d.inside), repr(d.loss_m), dp])
        return buf.getvalue()

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        mj, dc = out / "metrics.json", out / "diagnostics.csv"
        mj.write_text(self.to_json(), encoding="utf-8")
        dc.write_text(self.diagnostics_csv(), encoding="utf-8")
        return mj, dc


def associate_eval_tracks(
    tracks: Sequence[ObjectTrack],
    poses: PoseTrack,
    calib: Calibration,
    reject_threshold: float = 5.0,
    max_dt: int = DEFAULT_MAX_DT_US,
) -> list[ObjectTrack]:
    """Tracks whose mean world offset to the vehicle is strictly below the threshold."""
    out = [tr for tr in tracks if track_world_offset(tr, calib, poses, max_dt) < reject_threshold]
    if not out:
        raise EvaluationError(f"no track within {reject_threshold} m of the calibration vehicle")
    return out


def compute_metrics(
    tracks: Sequence[ObjectTrack],
    poses: PoseTrack,
    dims: VehicleDims,
    calib: Calibration,
    height_margin: float = 0.5,
    max_dt: int = DEFAULT_MAX_DT_US,
    edge_distance: bool = False,
) -> Metrics:
    """Inlier ratio, outlier error and nearest-corner error.

    Each radar target is counted once even though overlapping windows repeat
    it, and it is checked against the footprint at its own frame time.
    Targets whose height above the road exceeds ``dims.height + height_margin``
    (or lie that far below it) are skipped.
    """
    index: dict[tuple[int, int], int] = {}
    rows: list[TargetDiagnostic] = []
    sensor_xy = calib.t[:2]
    z_lim = dims.height + height_margin
    footprints: dict[int, np.ndarray] = {}
    poses_at: dict[int, object] = {}

    def pose(t):
        if t not in poses_at:
            poses_at[t] = try_pose_at(poses, t, max_dt)
        return poses_at[t]

    def corners(t):
        if t not in footprints:
            footprints[t] = vehicle_footprint(pose(t), dims).corners
        return footprints[t]

    def ground(t):
        p = pose(t)
        return p.p_world[2] + dims.ref_offset[2] - dims.height / 2

    for tr in tracks:
        for obs in tr.observations:
            world = obs.points @ calib.R.T + calib.t
            ranges = np.linalg.norm(obs.points, axis=1)
            nearest: tuple[float, int, int] | None = None
            for i, (member, t) in enumerate(zip(obs.members, obs.member_t)):
                t = int(t)
                if pose(t) is None or abs(world[i, 2] - ground(t)) >= z_lim:
                    continue
                if member not in index:
                    loss = float(polygon_losses(world[i, :2], corners(t), edge_distance)[0])
                    index[member] = len(rows)
                    rows.append(TargetDiagnostic(t, tr.id, float(ranges[i]), loss == 0.0, loss))
                if t == obs.t:
                    d = float(np.linalg.norm(world[i, :2] - sensor_xy))
                    if nearest is None or d < nearest[0]:
                        nearest = (d, index[member], i)
            if nearest is not None:
                _, row, i = nearest
                cs = corners(obs.t)
                j = int(np.argmin(np.linalg.norm(cs - sensor_xy, axis=1)))
                dp = float(np.linalg.norm(world[i, :2] - cs[j]))
                r = rows[row]
                rows[row] = TargetDiagnostic(r.t, r.track_id, r.range_m, r.inside, r.loss_m, dp)

    n = len(rows)
    n_in = sum(r.inside for r in rows)
    out_losses = [r.loss_m for r in rows if not r.inside]
    dps = [r.delta_p_m for r in rows if r.delta_p_m is not None]
    rows.sort(key=lambda r: (r.t, r.track_id, r.range_m))
    return Metrics(
        r_i=100.0 * n_in / n if n else 0.0,
        delta_op=float(np.mean(out_losses)) if out_losses else 0.0,
        delta_p=float(np.mean(dps)) if dps else float("nan"),
        n_targets=n,
        n_inliers=int(n_in),
        per_target=rows,
    )
