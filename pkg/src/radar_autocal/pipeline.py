"""Stage orchestration for calibration and evaluation runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .cluster import ClusteringError, ObjectTrack, TargetCluster, associate_tracks, cluster_frames
from .config import PipelineConfig
from .core import Calibration, GeometryError, RadarFrame, rotation_to_euler
from .evaluation import Metrics, associate_eval_tracks, compute_metrics
from .groundplane import GroundPlane, GroundPlaneError, estimate_ground
from .hypothesis import (
    CalibrationHypothesis,
    HypothesisCluster,
    HypothesisError,
    build_correspondences,
    cluster_hypotheses,
    finalize_calibration,
    make_hypothesis,
    select_hypothesis_cluster,
)
from .ingest import PoseTrack, RecordingSession
from .refine import RefineReport, RefinementError, refine_calibration
from .track import SmoothedTrack, TrackingError, smooth_track

log = logging.getLogger(__name__)


@dataclass
class CalibrationRun:
    calibration: Calibration
    initial: Calibration
    ground: GroundPlane
    tracks: list[ObjectTrack]
    smoothed: list[SmoothedTrack]
    hypotheses: list[CalibrationHypothesis]
    clusters: list[HypothesisCluster]
    selected: HypothesisCluster
    refine: RefineReport | None = None
    stages: dict[str, Any] = field(default_factory=dict)

    def report(self) -> dict[str, Any]:
        rows = []
        for i, c in enumerate(self.clusters):
            rows.append(
                {
                    "index": i,
                    "mean_t": c.mean_t.tolist(),
                    "members": len(c.members),
                    "track_ids": [h.track_id for h in c.members],
                    "mean_pairwise_angle_deg": float(np.degrees(c.mean_pairwise_angle)),
                    "mean_rms_m": c.mean_rms,
                    "selected": c is self.selected,
                }
            )
        out = dict(self.stages)
        out["hypothesis_clusters"] = rows
        out["hypotheses"] = [
            {"track_id": h.track_id, "t": h.t.tolist(), "rms_m": h.rms_residual, "n_pairs": len(h.corrs)}
            for h in self.hypotheses
        ]
        out["initial"] = calibration_summary(self.initial)
        out["final"] = calibration_summary(self.calibration)
        if self.refine is not None:
            r = self.refine
            out["refine"] = {
                "accepted": r.accepted,
                "iterations": r.iterations,
                "n_tracks": r.n_tracks,
                "n_pairs": r.n_pairs,
                "offset_m": [r.offset.dx, r.offset.dy],
                "offset_converged": r.offset_converged,
                "loss_before_m": r.loss_before,
                "loss_after_m": r.loss_after,
            }
        return out


def calibration_summary(c: Calibration) -> dict[str, Any]:
    return {
        "t": c.t.tolist(),
        "rpy_deg": np.degrees(rotation_to_euler(c.R)).tolist(),
        "residual_rms_m": c.residual_rms,
    }


def track_objects(frames: Sequence[RadarFrame], cfg: PipelineConfig, level: np.ndarray | None = None):
    """Windowed clustering and association; returns (cluster steps, tracks)."""
    steps = cluster_frames(frames, cfg.cluster_params)
    if not any(cl for _, cl in steps):
        raise ClusteringError("no moving-target clusters in the recording")
    tracks = associate_tracks(steps, cfg.assoc_gate, level, cfg.assoc_max_gap)
    return steps, tracks


def ground_points(steps: Sequence[tuple[int, Sequence[TargetCluster]]]) -> np.ndarray:
    """Clustered moving targets, each counted once."""
    seen: dict[tuple[int, int], np.ndarray] = {}
    for _, clusters in steps:
        for c in clusters:
            for m, p in zip(c.members, c.points):
                seen.setdefault(m, p)
    return np.array([seen[k] for k in sorted(seen)]).reshape(-1, 3)


def run_calibration(session: RecordingSession, cfg: PipelineConfig = PipelineConfig()) -> CalibrationRun:
    stages: dict[str, Any] = {"n_frames": len(session.radar), "n_pose_samples": len(session.pose.t)}

    steps = cluster_frames(session.radar, cfg.cluster_params)
    if not any(cl for _, cl in steps):
        raise ClusteringError("no moving-target clusters in the recording")
    pts = ground_points(steps)
    stages["n_clustered_targets"] = len(pts)

    try:
        ground = estimate_ground(pts, cfg.ground_radius, cfg.ground_keep_fraction)
    except GeometryError as exc:
        raise GroundPlaneError(str(exc)) from exc
    stages["ground"] = {
        "normal": ground.n.tolist(),
        "roll_deg": float(np.degrees(ground.roll)),
        "pitch_deg": float(np.degrees(ground.pitch)),
        "n_points": ground.n_points,
    }

    tracks = associate_tracks(steps, cfg.assoc_gate, ground.R_level, cfg.assoc_max_gap)
    smoothed = []
    for tr in tracks:
        if len(tr) < cfg.track_min_length:
            continue
        try:
            smoothed.append(smooth_track(tr, ground.R_level, cfg.noise, cfg.track_min_length))
        except TrackingError as exc:
            log.warning("track %d dropped: %s", tr.id, exc)
    stages["n_tracks"] = len(tracks)
    stages["n_smoothed_tracks"] = len(smoothed)

    hyps = []
    for st in smoothed:
        try:
            corrs = build_correspondences(
                st, session.pose, cfg.hypothesis_elevation_mode, cfg.pose_max_dt_us, ground.R_level
            )
        except HypothesisError as exc:
            log.info("%s", exc)
            continue
        h = make_hypothesis(st.id, corrs)
        if h is not None:
            hyps.append(h)
    stages["n_hypotheses"] = len(hyps)
    clusters = cluster_hypotheses(hyps, cfg.hypothesis_eps_t, cfg.hypothesis_min_pts)
    selected = select_hypothesis_cluster(clusters)
    try:
        zero = cfg.hypothesis_elevation_mode == "zero"
        initial = finalize_calibration(
            selected, ground, session.pose.origin, len(hyps), cfg.vehicle_ref_offset_z if zero else None
        )
    except GeometryError as exc:
        raise HypothesisError(f"final registration failed: {exc}") from exc

    calib, report = initial, None
    if cfg.refine_enabled:
        try:
            params = replace(cfg.refine_params, target_plane_z=ground.d if zero else None)
            calib, report = refine_calibration(initial, tracks, session.pose, cfg.dims, params)
        except (GeometryError, TrackingError) as exc:
            raise RefinementError(str(exc)) from exc
    return CalibrationRun(calib, initial, ground, tracks, smoothed, hyps, clusters, selected, report, stages)


@dataclass
class EvaluationRun:
    metrics: Metrics
    tracks: list[ObjectTrack]
    accepted: list[ObjectTrack]


def run_evaluation(session: RecordingSession, calib: Calibration, cfg: PipelineConfig = PipelineConfig()) -> EvaluationRun:
    _, tracks = track_objects(session.radar, cfg, calib.R_level)
    tracks = [tr for tr in tracks if len(tr) >= cfg.track_min_length]
    accepted = associate_eval_tracks(tracks, session.pose, calib, cfg.eval_reject_threshold, cfg.pose_max_dt_us)
    metrics = compute_metrics(
        accepted, session.pose, cfg.dims, calib, cfg.eval_height_margin, cfg.pose_max_dt_us, cfg.refine_edge_distance
    )
    return EvaluationRun(metrics, tracks, accepted)
