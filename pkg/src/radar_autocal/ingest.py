"""Radar/pose log I/O and pose lookup at radar timestamps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    Calibration,
    PipelineError,
    RadarFrame,
    UtmOrigin,
    VehiclePose,
    euler_to_rotation,
    quaternion_to_rotation,
    rotation_to_euler,
    rotation_to_quaternion,
    wrap_angle,
)

SCHEMA_LINE = "# schema=1"
POSE_HEADER = ["t_us", "utm_zone", "easting", "northing", "altitude", "roll", "pitch", "yaw"]
DEFAULT_MAX_DT_US = 50_000
GAP_FACTOR = 5.0
CALIBRATION_SCHEMA = 1


class IngestError(PipelineError):
    code = "ingest"


class NoPoseError(PipelineError):
    code = "no_pose"


@dataclass(frozen=True)
class PoseTrack:
    """Time-sorted vehicle poses, stored column-wise.

    ``breaks`` holds indices ``i`` for which the interval ``(t[i], t[i+1])``
    is a recording gap and must not be interpolated across.
    """

    t: np.ndarray
    p: np.ndarray
    rpy: np.ndarray
    nominal_rate: float = 50.0
    origin: UtmOrigin = field(default_factory=UtmOrigin)
    breaks: tuple[int, ...] = ()

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        if len(t) == 0:
            raise IngestError("empty pose track")
        if np.any(np.diff(t) <= 0):
            raise IngestError("pose timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "rpy", np.asarray(self.rpy, dtype=float).reshape(-1, 3))
        if not self.breaks:
            object.__setattr__(self, "breaks", find_breaks(t, self.nominal_rate))

    def __len__(self) -> int:
        return len(self.t)

    @property
    def samples(self) -> list[VehiclePose]:
        return [VehiclePose(int(t), p, r) for t, p, r in zip(self.t, self.p, self.rpy)]

    def sample(self, i: int) -> VehiclePose:
        return VehiclePose(int(self.t[i]), self.p[i].copy(), self.rpy[i].copy())

    def shifted(self, offset: np.ndarray) -> "PoseTrack":
        return PoseTrack(self.t, self.p + np.asarray(offset), self.rpy, self.nominal_rate, self.origin, self.breaks)


@dataclass(frozen=True)
class RecordingSession:
    radar: list[RadarFrame]
    pose: PoseTrack
    sensor_id: str = ""

    @property
    def duration_s(self) -> float:
        return (self.radar[-1].t - self.radar[0].t) / 1e6 if self.radar else 0.0


def find_breaks(t: np.ndarray, nominal_rate: float) -> tuple[int, ...]:
    limit = GAP_FACTOR * 1e6 / nominal_rate
    return tuple(int(i) for i in np.flatnonzero(np.diff(t) > limit))


def spherical_to_cartesian(r, az, el) -> np.ndarray:
    r, az, el = (np.asarray(v, dtype=float) for v in (r, az, el))
    return np.stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)], axis=-1)


def cartesian_to_spherical(p) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    r = np.linalg.norm(p, axis=-1)
    az = np.arctan2(p[..., 1], p[..., 0])
    el = np.arcsin(np.clip(p[..., 2] / r, -1.0, 1.0))
    return r, az, el


def _read_schema(lines: list[str], path: Path) -> list[tuple[int, str]]:
    numbered = [(i + 1, ln.strip()) for i, ln in enumerate(lines)]
    numbered = [(n, ln) for n, ln in numbered if ln]
    if not numbered:
        raise IngestError(f"{path}: empty file")
    n0, first = numbered[0]
    if not first.startswith("#"):
        raise IngestError(f"{path}:{n0}: missing '{SCHEMA_LINE}' header")
    if first.replace(" ", "") != SCHEMA_LINE.replace(" ", ""):
        raise IngestError(f"{path}:{n0}: unsupported schema line {first!r}")
    return numbered[1:]


def _parse_target(row: dict) -> tuple[list[float], float, float]:
    if "r" in row:
        r, az, el = float(row["r"]), float(row["az"]), float(row["el"])
        if r <= 0:
            raise ValueError("non-positive range")
        p = spherical_to_cartesian(r, az, el).tolist()
    else:
        p = [float(row["x"]), float(row["y"]), float(row["z"])]
    rcs = row.get("rcs")
    return p, float(row["v_rad"]), float("nan") if rcs is None else float(rcs)


def read_radar_log(path) -> list[RadarFrame]:
    """Parse a JSON-lines radar log into time-sorted frames."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read radar log {path}: {exc}") from exc
    rows = _read_schema(text.splitlines(), path)
    if not rows:
        raise IngestError(f"{path}: no radar frames")
    frames: list[RadarFrame] = []
    for lineno, line in rows:
        try:
            obj = json.loads(line)
            t = int(obj["t_us"])
            parsed = [_parse_target(tg) for tg in obj["targets"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestError(f"{path}:{lineno}: malformed frame ({exc})") from exc
        if t <= 0:
            raise IngestError(f"{path}:{lineno}: non-positive timestamp")
        if frames and t <= frames[-1].t:
            raise IngestError(f"{path}:{lineno}: frame timestamps not increasing")
        pts = np.array([p for p, _, _ in parsed], dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise IngestError(f"{path}:{lineno}: non-finite target position")
        frames.append(
            RadarFrame(t, pts, np.array([v for _, v, _ in parsed]), np.array([c for _, _, c in parsed]))
        )
    return frames


def write_radar_log(path, frames, fmt: str = "spherical") -> None:
    if fmt not in ("spherical", "cartesian"):
        raise ValueError(f"unknown radar format {fmt!r}")
    lines = [SCHEMA_LINE]
    for fr in frames:
        targets = []
        if fmt == "spherical":
            r, az, el = cartesian_to_spherical(fr.points)
            cols = {"r": r, "az": az, "el": el}
        else:
            cols = {"x": fr.points[:, 0], "y": fr.points[:, 1], "z": fr.points[:, 2]}
        for i in range(len(fr)):
            row = {k: float(v[i]) for k, v in cols.items()}
            row["v_rad"] = float(fr.v_rad[i])
            if not np.isnan(fr.rcs[i]):
                row["rcs"] = float(fr.rcs[i])
            targets.append(row)
        lines.append(json.dumps({"t_us": int(fr.t), "targets": targets}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pose_log(path, nominal_rate: float = 50.0) -> PoseTrack:
    """Parse a pose CSV; positions are shifted by the whole-meter origin of the first sample."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read pose log {path}: {exc}") from exc
    rows = _read_schema(text.splitlines(), path)
    if not rows:
        raise IngestError(f"{path}: no header")
    header_no, header = rows[0]
    if [h.strip() for h in header.split(",")] != POSE_HEADER:
        raise IngestError(f"{path}:{header_no}: expected header {','.join(POSE_HEADER)}")
    if len(rows) < 2:
        raise IngestError(f"{path}: no pose samples")
    ts, zones, vals = [], [], []
    for lineno, line in rows[1:]:
        rec = next(csv.reader([line]))
        try:
            if len(rec) != len(POSE_HEADER):
                raise ValueError(f"expected {len(POSE_HEADER)} columns, got {len(rec)}")
            t = int(rec[0])
            v = [float(x) for x in rec[2:]]
        except ValueError as exc:
            raise IngestError(f"{path}:{lineno}: malformed row ({exc})") from exc
        if not all(math.isfinite(x) for x in v):
            raise IngestError(f"{path}:{lineno}: non-finite value")
        if any(not (-math.pi < a <= math.pi) for a in v[3:]):
            raise IngestError(f"{path}:{lineno}: roll/pitch/yaw outside (-pi, pi]")
        if ts and t <= ts[-1]:
            raise IngestError(f"{path}:{lineno}: pose timestamps not strictly increasing")
        ts.append(t)
        zones.append(rec[1].strip())
        vals.append(v)
    if len(set(zones)) > 1:
        raise IngestError(f"{path}: pose log spans several UTM zones {sorted(set(zones))}")
    vals = np.array(vals)
    origin = UtmOrigin(zones[0], math.floor(vals[0, 0]), math.floor(vals[0, 1]))
    p = vals[:, :3].copy()
    p[:, 0] -= origin.easting
    p[:, 1] -= origin.northing
    return PoseTrack(np.array(ts, dtype=np.int64), p, vals[:, 3:], nominal_rate, origin)


def write_pose_log(path, track: PoseTrack) -> None:
    """Write absolute UTM poses (the local origin is added back)."""
    lines = [SCHEMA_LINE, ",".join(POSE_HEADER)]
    o = track.origin
    for t, p, rpy in zip(track.t, track.p, track.rpy):
        vals = [p[0] + o.easting, p[1] + o.northing, p[2], *rpy]
        lines.append(",".join([str(int(t)), o.zone] + [repr(float(v)) for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_session(radar_path, pose_path, sensor_id: str = "") -> RecordingSession:
    return RecordingSession(read_radar_log(radar_path), read_pose_log(pose_path), sensor_id)


def _interp_angle(a0: np.ndarray, a1: np.ndarray, w: float) -> np.ndarray:
    return wrap_angle(a0 + w * wrap_angle(a1 - a0))


def pose_at(track: PoseTrack, t: int, max_dt: int = DEFAULT_MAX_DT_US, nearest: bool = False) -> VehiclePose:
    """Pose at radar time ``t``.

    Linear interpolation of position and shortest-arc interpolation of each
    angle between the bracketing samples. Raises :class:`NoPoseError` when no
    sample lies within ``max_dt`` or ``t`` falls inside a recording gap.
    """
    ts = track.t
    i = int(np.searchsorted(ts, t))
    if i < len(ts) and ts[i] == t:
        return track.sample(i)
    nearest_dt = min(abs(int(ts[j]) - t) for j in (i - 1, i) if 0 <= j < len(ts))
    if nearest_dt > max_dt:
        raise NoPoseError(f"no pose available within {max_dt} us of t={t}")
    if i == 0 or i == len(ts):
        return track.sample(0 if i == 0 else len(ts) - 1)
    if (i - 1) in track.breaks:
        raise NoPoseError(f"t={t} falls inside a pose recording gap")
    if nearest:
        j = i - 1 if t - ts[i - 1] <= ts[i] - t else i
        return track.sample(j)
    w = (t - ts[i - 1]) / (ts[i] - ts[i - 1])
    p = (1.0 - w) * track.p[i - 1] + w * track.p[i]
    rpy = _interp_angle(track.rpy[i - 1], track.rpy[i], w)
    return VehiclePose(int(t), p, rpy)


def try_pose_at(track: PoseTrack, t: int, max_dt: int = DEFAULT_MAX_DT_US, nearest: bool = False):
    try:
        return pose_at(track, t, max_dt, nearest)
    except NoPoseError:
        return None


def calibration_to_dict(c: Calibration, created_utc: str | None = None) -> dict:
    roll, pitch, _ = rotation_to_euler(c.R_level)
    d = {
        "schema": CALIBRATION_SCHEMA,
        "utm_zone": c.origin.zone,
        "origin": [float(c.origin.easting), float(c.origin.northing)],
        "t": [float(v) for v in c.t],
        "q_wxyz": [float(v) for v in rotation_to_quaternion(c.R)],
        "rpy_deg": [math.degrees(a) for a in rotation_to_euler(c.R)],
        "r_level_rpy_deg": [math.degrees(roll), math.degrees(pitch), 0.0],
        "residual_rms_m": None if math.isnan(c.residual_rms) else float(c.residual_rms),
        "n_hypotheses": int(c.n_hypotheses),
        "refined": bool(c.refined),
    }
    if created_utc is not None:
        d["created_utc"] = created_utc
    return d


def write_calibration(path, c: Calibration, created_utc: str | None = None, extra: dict | None = None) -> None:
    d = calibration_to_dict(c, created_utc)
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")


def read_calibration(path) -> Calibration:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"cannot read calibration {path}: {exc}") from exc
    if not isinstance(d, dict) or d.get("schema") != CALIBRATION_SCHEMA:
        found = d.get("schema") if isinstance(d, dict) else None
        raise IngestError(f"{path}: unsupported calibration schema {found!r}, expected {CALIBRATION_SCHEMA}")
    try:
        roll, pitch, _ = (math.radians(a) for a in d["r_level_rpy_deg"])
        rms = d.get("residual_rms_m")
        return Calibration(
            quaternion_to_rotation(d["q_wxyz"]),
            np.array(d["t"], dtype=float),
            euler_to_rotation(roll, pitch, 0.0),
            UtmOrigin(str(d["utm_zone"]), float(d["origin"][0]), float(d["origin"][1])),
            float("nan") if rms is None else float(rms),
            int(d.get("n_hypotheses", 0)),
            bool(d.get("refined", False)),
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise IngestError(f"{path}: malformed calibration ({exc})") from exc
