"""``radar-autocal`` command line: calibrate, evaluate, simulate, inspect."""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cluster import ClusteringError
from .config import ConfigError, PipelineConfig
from .core import PipelineError
from .evaluation import EvaluationError
from .groundplane import GroundPlaneError
from .hypothesis import HypothesisError
from .ingest import IngestError, NoPoseError, load_session, read_calibration, read_radar_log, write_calibration
from .refine import RefinementError
from .track import TrackingError

log = logging.getLogger("radar_autocal")

EXIT_OK = 0
EXIT_SIMULATE = 1
EXIT_CODES = [
    (IngestError, 2, "ingest"),
    (NoPoseError, 2, "ingest"),
    (ConfigError, 2, "ingest"),
    (ClusteringError, 3, "clustering"),
    (TrackingError, 3, "tracking"),
    (GroundPlaneError, 4, "ground plane"),
    (HypothesisError, 5, "hypothesis"),
    (RefinementError, 6, "refinement"),
    (EvaluationError, 7, "evaluation"),
]


def exit_code(exc: BaseException) -> tuple[int, str]:
    for cls, code, stage in EXIT_CODES:
        if isinstance(exc, cls):
            return code, stage
    return 1, "internal"


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    return cfg.with_overrides(args.set or [])


def _setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s")


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _fmt_vec(v) -> str:
    return "[" + ", ".join(f"{x:.4f}" for x in v) + "]"


def format_calibration_report(report: dict) -> str:
    lines = [
        f"radar frames        {report['n_frames']}",
        f"pose samples        {report['n_pose_samples']}",
        f"clustered targets   {report['n_clustered_targets']}",
        f"tracks              {report['n_tracks']} ({report['n_smoothed_tracks']} smoothed)",
        f"hypotheses          {report['n_hypotheses']}",
        "",
        "ground plane",
        f"  normal            {_fmt_vec(report['ground']['normal'])}",
        f"  roll / pitch deg  {report['ground']['roll_deg']:.4f} / {report['ground']['pitch_deg']:.4f}",
        "",
        "hypothesis clusters",
        f"  {'#':>2} {'members':>7} {'angle deg':>10} {'rms m':>8}  mean_t",
    ]
    for row in report["hypothesis_clusters"]:
        mark = "*" if row["selected"] else " "
        lines.append(
            f" {mark}{row['index']:>2} {row['members']:>7} {row['mean_pairwise_angle_deg']:>10.4f}"
            f" {row['mean_rms_m']:>8.4f}  {_fmt_vec(row['mean_t'])}"
        )
    for key in ("initial", "final"):
        c = report[key]
        lines += ["", f"{key} calibration", f"  t                 {_fmt_vec(c['t'])}", f"  rpy deg           {_fmt_vec(c['rpy_deg'])}"]
        lines.append(f"  residual rms m    {c['residual_rms_m']:.4f}")
    if "refine" in report:
        r = report["refine"]
        lines += [
            "",
            "refinement",
            f"  accepted          {r['accepted']}",
            f"  iterations        {r['iterations']} ({r['n_tracks']} tracks, {r['n_pairs']} pairs)",
            f"  planar offset m   {_fmt_vec(r['offset_m'])}",
            f"  containment loss  {r['loss_before_m']:.4f} -> {r['loss_after_m']:.4f}",
        ]
    return "\n".join(lines) + "\n"


def cmd_calibrate(args) -> int:
    from .pipeline import run_calibration

    cfg = _load_config(args)
    session = load_session(args.radar, args.pose)
    run = run_calibration(session, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    created = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
    write_calibration(out / "calibration.json", run.calibration, created)
    report = run.report()
    report["status"] = "ok"
    _json_dump(out / "report.json", report)
    (out / "report.txt").write_text(format_calibration_report(report), encoding="utf-8")
    f = report["final"]
    print(f"calibration written to {out / 'calibration.json'}")
    print(f"t = {_fmt_vec(f['t'])}  rpy_deg = {_fmt_vec(f['rpy_deg'])}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .pipeline import run_evaluation

    cfg = _load_config(args)
    calib = read_calibration(args.calib)
    session = load_session(args.radar, args.pose)
    if calib.origin.zone and session.pose.origin.zone and calib.origin.zone != session.pose.origin.zone:
        raise IngestError(f"calibration zone {calib.origin.zone} differs from pose zone {session.pose.origin.zone}")
    shift = np.array(
        [calib.origin.easting - session.pose.origin.easting, calib.origin.northing - session.pose.origin.northing, 0.0]
    )
    calib = calib.replace(t=calib.t + shift, origin=session.pose.origin)
    run = run_evaluation(session, calib, cfg)
    out = Path(args.out)
    mj, dc = run.metrics.write(out)
    report = {
        "status": "ok",
        "n_tracks": len(run.tracks),
        "n_accepted_tracks": len(run.accepted),
        "accepted_track_ids": [tr.id for tr in run.accepted],
        "metrics": run.metrics.to_dict(),
    }
    if cfg.figures:
        from . import plots

        figs = out / "figures"
        report["figures"] = [
            str(plots.plot_outlier_error(run.metrics, figs / "outlier_error_vs_range.png")),
            str(plots.plot_corner_error(run.metrics, cfg.dims, figs / "corner_error_vs_range.png")),
            str(plots.plot_bev(run.accepted, calib, session.pose, cfg.dims, figs / "bev.png")),
        ]
    _json_dump(out / "report.json", report)
    m = run.metrics
    print(f"r_i = {m.r_i:.2f} %  delta_op = {m.delta_op:.3f} m  delta_p = {m.delta_p:.3f} m  ({m.n_targets} targets)")
    print(f"metrics written to {mj}, diagnostics to {dc}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .sim import ScenarioConfig, ScenarioError, canonical_scenario, generate_scenario, realistic_scenario, write_scenario

    try:
        if args.scenario == "canonical":
            cfg = canonical_scenario()
        elif args.scenario == "realistic":
            cfg = realistic_scenario()
        else:
            cfg = ScenarioConfig.load(args.scenario)
        if args.seed is not None:
            cfg.seed = args.seed
        paths = write_scenario(generate_scenario(cfg), args.out)
    except (ScenarioError, TypeError, ValueError) as exc:
        print(f"error: simulate: {exc}", file=sys.stderr)
        return EXIT_SIMULATE
    for name, p in paths.items():
        print(f"{name:7s} {p}")
    return EXIT_OK


def inspect_summary(frames) -> dict:
    counts = np.array([len(f) for f in frames])
    pts = np.concatenate([f.points for f in frames]) if frames else np.zeros((0, 3))
    v = np.concatenate([f.v_rad for f in frames]) if frames else np.zeros(0)
    r = np.linalg.norm(pts, axis=1)
    out = {
        "n_frames": len(frames),
        "n_targets": int(counts.sum()),
        "duration_s": (frames[-1].t - frames[0].t) / 1e6 if frames else 0.0,
        "targets_per_frame_mean": float(counts.mean()) if len(counts) else 0.0,
        "targets_per_frame_max": int(counts.max()) if len(counts) else 0,
        "empty_frames": int((counts == 0).sum()),
    }
    if len(frames) > 1:
        dts = np.diff([f.t for f in frames]) / 1e6
        out["frame_rate_hz"] = float(1.0 / np.median(dts))
    if len(r):
        out["range_m"] = [float(r.min()), float(r.max())]
        out["v_rad_m_s"] = [float(v.min()), float(v.max())]
        out["moving_fraction"] = float(np.mean(np.abs(v) >= 0.1 / 3.6))
    return out


def cmd_inspect(args) -> int:
    summary = inspect_summary(read_radar_log(args.radar))
    if args.json:
        print(json.dumps(summary, indent=2))
    else:
        for k, v in summary.items():
            print(f"{k:24s} {v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radar-autocal", description=__doc__)
    p.add_argument("--log-level", default=None, choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")

    c = sub.add_parser("calibrate", help="estimate the sensor calibration from a recording")
    c.add_argument("--radar", required=True)
    c.add_argument("--pose", required=True)
    c.add_argument("--out", required=True)
    add_config(c)
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", help="score a calibration on a held-out recording")
    e.add_argument("--radar", required=True)
    e.add_argument("--pose", required=True)
    e.add_argument("--calib", required=True)
    e.add_argument("--out", required=True)
    add_config(e)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", help="write a synthetic recording with known calibration")
    s.add_argument("--scenario", required=True, help="scenario JSON file, or 'canonical' / 'realistic'")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("inspect", help="summary statistics of a radar log")
    i.add_argument("--radar", required=True)
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = args.log_level
    if level is None and hasattr(args, "config"):
        try:
            level = _load_config(args).verbosity
        except ConfigError:
            level = None
    _setup_logging(level or "warning")
    try:
        return args.func(args)
    except (PipelineError, ConfigError) as exc:
        code, stage = exit_code(exc)
        print(f"error: {stage}: {exc}", file=sys.stderr)
        out = getattr(args, "out", None)
        if out and args.command in ("calibrate", "evaluate"):
            try:
                Path(out).mkdir(parents=True, exist_ok=True)
                _json_dump(Path(out) / "report.json", {"status": "error", "stage": stage, "exit_code": code, "message": str(exc)})
            except OSError:
                pass
        return code


if __name__ == "__main__":
    sys.exit(main())
