"""Synthetic radar + localization recordings with known sensor calibration.

Every radar frame draws from its own RNG streams, derived from the scenario
seed as ``SeedSequence(seed, spawn_key=(stream, frame_index))``, so adding
draws in one stream or frame never shifts another.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .core import (
    Calibration,
    PipelineError,
    RadarFrame,
    UtmOrigin,
    VehicleDims,
    euler_to_rotation,
    wrap_angle,
)
from .ingest import (
    PoseTrack,
    calibration_to_dict,
    cartesian_to_spherical,
    spherical_to_cartesian,
    write_pose_log,
    write_radar_log,
)

STREAM_VEHICLE, STREAM_CLUTTER, STREAM_NOISE = 0, 1, 2
LABEL_VEHICLE, LABEL_BYSTANDER, LABEL_STATIC, LABEL_MOVING = "vehicle", "bystander", "clutter_static", "clutter_moving"


class ScenarioError(PipelineError):
    code = "scenario"


@dataclass
class Route:
    waypoints: list[list[float]]
    speed: float = 8.0
    turn_radius: float = 12.0


@dataclass
class Bystander:
    route: Route
    start_s: float = 0.0
    length: float = 4.5
    width: float = 1.8
    height: float = 1.5


@dataclass
class ScenarioConfig:
    seed: int = 0
    passes: int = 6
    sensor_position: list[float] = field(default_factory=lambda: [0.0, 0.0, 485.0])
    truth_rpy_deg: list[float] = field(default_factory=lambda: [1.5, -12.0, 120.0])
    utm_zone: str = "32U"
    utm_easting: float = 572000.0
    utm_northing: float = 5362000.0
    road_altitude: float = 480.0
    routes: list[Route] = field(default_factory=list)
    bystanders: list[Bystander] = field(default_factory=list)
    dims: VehicleDims = field(default_factory=VehicleDims)
    radar_rate: float = 15.0
    pose_rate: float = 50.0
    sigma_range: float = 0.0
    sigma_angle_deg: float = 0.0
    sigma_v: float = 0.0
    clutter_rate: float = 0.0
    reflection_model: str = "surface"
    reflections_mean: float = 4.0
    body_margin: float = 0.0
    fov_az_deg: float = 60.0
    fov_el_deg: float = 45.0
    fov_r_min: float = 0.5
    fov_r_max: float = 150.0
    pass_gap_s: float = 4.0
    start_us: int = 1_700_000_000_000_000

    def __post_init__(self):
        if not self.routes:
            self.routes = default_routes()
        self.routes = [r if isinstance(r, Route) else Route(**r) for r in self.routes]
        self.bystanders = [
            b if isinstance(b, Bystander) else Bystander(**{**b, "route": Route(**b["route"])}) for b in self.bystanders
        ]
        if isinstance(self.dims, dict):
            self.dims = VehicleDims(**self.dims)
        self.validate()

    def validate(self) -> None:
        if self.radar_rate <= 0 or self.pose_rate <= 0:
            raise ScenarioError("radar_rate and pose_rate must be positive")
        if self.passes < 1:
            raise ScenarioError("passes must be >= 1")
        if min(self.sigma_range, self.sigma_angle_deg, self.sigma_v, self.clutter_rate, self.body_margin) < 0:
            raise ScenarioError("noise levels, clutter rate and margin must be non-negative")
        if self.reflection_model not in ("surface", "corners"):
            raise ScenarioError(f"unknown reflection model {self.reflection_model!r}")
        if not (0 <= self.fov_r_min < self.fov_r_max) or self.fov_az_deg <= 0 or self.fov_el_deg <= 0:
            raise ScenarioError("field-of-view limits are not well ordered")
        for r in self.routes + [b.route for b in self.bystanders]:
            if len(r.waypoints) < 2 or r.speed <= 0 or r.turn_radius <= 0:
                raise ScenarioError("routes need >= 2 waypoints, positive speed and turn radius")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ScenarioError(f"cannot load scenario {path}: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def truth_rotation(self) -> np.ndarray:
        return euler_to_rotation(*np.radians(self.truth_rpy_deg))


def default_routes() -> list[Route]:
    """Two turning routes through an intersection north-west of the sensor."""
    return [
        Route([[40.0, 40.75], [-24.25, 40.75], [-24.25, -5.0]], 8.0, 12.0),
        Route([[-20.75, -5.0], [-20.75, 37.25], [40.0, 37.25]], 8.0, 12.0),
    ]


def canonical_scenario(seed: int = 0) -> ScenarioConfig:
    """Noiseless six-pass scenario with corner reflections.

    The field of view is wide enough that no vehicle is ever cut by its edge.
    """
    return ScenarioConfig(seed=seed, reflection_model="corners", fov_az_deg=90.0)


def realistic_scenario(seed: int = 0) -> ScenarioConfig:
    return ScenarioConfig(
        seed=seed,
        sigma_range=0.15,
        sigma_angle_deg=0.3,
        sigma_v=0.1,
        clutter_rate=2.0,
        reflection_model="surface",
        body_margin=0.02,
        bystanders=[
            Bystander(Route([[-90.0, 37.25], [40.0, 37.25]], 11.0, 10.0), start_s=3.0),
            Bystander(Route([[-24.25, 100.0], [-24.25, 40.75], [-90.0, 40.75]], 7.0, 10.0), start_s=45.0),
        ],
    )


# ---------------------------------------------------------------------------
# path geometry
# ---------------------------------------------------------------------------


class Path2D:
    """Polyline with circular fillets, parametrised by arc length."""

    def __init__(self, route: Route):
        P = np.asarray(route.waypoints, dtype=float)
        self.segments: list[tuple] = []
        start = P[0]
        for i in range(1, len(P) - 1):
            u1 = (P[i] - P[i - 1]) / np.linalg.norm(P[i] - P[i - 1])
            u2 = (P[i + 1] - P[i]) / np.linalg.norm(P[i + 1] - P[i])
            turn = math.atan2(u1[0] * u2[1] - u1[1] * u2[0], u1 @ u2)
            if abs(turn) < 1e-12:
                continue
            r = route.turn_radius
            tan_len = r * math.tan(abs(turn) / 2)
            a, b = P[i] - tan_len * u1, P[i] + tan_len * u2
            self._line(start, a)
            side = 1.0 if turn > 0 else -1.0
            normal = side * np.array([-u1[1], u1[0]])
            center = a + r * normal
            self.segments.append(("arc", center, r, math.atan2(a[1] - center[1], a[0] - center[0]), turn, r * abs(turn)))
            start = b
        self._line(start, P[-1])
        self.lengths = np.array([s[-1] for s in self.segments])
        self.offsets = np.concatenate([[0.0], np.cumsum(self.lengths)])
        self.length = float(self.offsets[-1])

    def _line(self, a, b):
        d = np.linalg.norm(b - a)
        if d > 1e-12:
            self.segments.append(("line", a.copy(), (b - a) / d, d))

    def state(self, s: float) -> tuple[np.ndarray, float, float]:
        """(position, heading, curvature) at arc length ``s``."""
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self.offsets, s, side="right")) - 1, len(self.segments) - 1)
        seg = self.segments[i]
        u = s - self.offsets[i]
        if seg[0] == "line":
            _, a, d, _ = seg
            return a + u * d, math.atan2(d[1], d[0]), 0.0
        _, c, r, phi0, turn, _ = seg
        side = 1.0 if turn > 0 else -1.0
        phi = phi0 + side * u / r
        pos = c + r * np.array([math.cos(phi), math.sin(phi)])
        return pos, wrap_angle(phi + side * math.pi / 2), side / r


@dataclass
class _Object:
    path: Path2D
    speed: float
    t_start: int
    t_end: int
    length: float
    width: float
    height: float
    ref_offset: tuple[float, float, float]
    label: str
    obj_id: int

    def active(self, t: int) -> bool:
        return self.t_start <= t <= self.t_end

    def kinematics(self, t: int) -> tuple[np.ndarray, float, float, float]:
        """(ref position xy, yaw, speed, yaw rate) at time ``t``."""
        pos, yaw, kappa = self.path.state(self.speed * (t - self.t_start) / 1e6)
        return pos, yaw, self.speed, self.speed * kappa


# ---------------------------------------------------------------------------
# reflections
# ---------------------------------------------------------------------------


def fov_filter(p_sensor, az_limit: float, el_limit: float, r_min: float, r_max: float) -> bool | np.ndarray:
    """Inclusive field-of-view test on sensor-frame point(s); limits in radians/meters."""
    r, az, el = cartesian_to_spherical(np.asarray(p_sensor, dtype=float))
    tol = 1e-12
    ok = (np.abs(az) <= az_limit + tol) & (np.abs(el) <= el_limit + tol) & (r >= r_min) & (r <= r_max)
    return bool(ok) if np.ndim(ok) == 0 else ok


def _box_frame(obj: _Object, t: int, ground_z: float):
    ref, yaw, speed, yaw_rate = obj.kinematics(t)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    center = ref + rot @ np.array(obj.ref_offset[:2])
    return ref, yaw, speed, yaw_rate, rot, center


def _visible_faces(rot, center, hl, hw, sensor_xy) -> list[int]:
    # faces: 0 front (+x), 1 left (+y), 2 rear (-x), 3 right (-y)
    normals = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([-1.0, 0.0]), np.array([0.0, -1.0])]
    extents = [hl, hw, hl, hw]
    out = []
    for k, (n, e) in enumerate(zip(normals, extents)):
        nw = rot @ n
        face_center = center + e * nw
        if nw @ (sensor_xy - face_center) > 0:
            out.append(k)
    return out


_FACE_CORNERS = {0: [(1, -1), (1, 1)], 1: [(1, 1), (-1, 1)], 2: [(-1, 1), (-1, -1)], 3: [(-1, -1), (1, -1)]}


def vehicle_reflections(
    obj: _Object, t: int, cfg: ScenarioConfig, sensor: np.ndarray, ground_z: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """World points on the sensor-facing side of the box and their velocities (N, 3) each.

    Only the vertical faces reflect; the roof is seen at grazing incidence.
    """
    sensor_xy = sensor[:2]
    ref, yaw, speed, yaw_rate, rot, center = _box_frame(obj, t, ground_z)
    m = cfg.body_margin
    hl, hw = obj.length / 2 - m, obj.width / 2 - m
    faces = _visible_faces(rot, center, obj.length / 2, obj.width / 2, sensor_xy)
    if not faces:
        return np.zeros((0, 3)), np.zeros((0, 3))
    if cfg.reflection_model == "corners":
        # vertical corner edges and the two axle centers, all at mid-height
        keys = sorted({c for f in faces for c in _FACE_CORNERS[f]}, key=lambda c: (-c[0], -c[1]))
        local = [[sx * hl, sy * hw] for sx, sy in keys]
        ox, oy = obj.ref_offset[0], obj.ref_offset[1]
        axles = [[-ox, -oy]] if ox == 0 and oy == 0 else [[-ox, -oy], [ox, oy]]
        local = np.array(local + axles)
        z = np.full(len(local), ground_z + obj.height / 2)
    else:
        count = 0
        while not 1 <= count <= 8:
            count = int(rng.poisson(cfg.reflections_mean))
        hh = obj.height - 2 * m
        areas = np.array([2 * (hw if f in (0, 2) else hl) * hh for f in faces])
        pick = rng.choice(len(faces), size=count, p=areas / areas.sum())
        u = rng.uniform(-1.0, 1.0, size=(count, 2))
        local = np.empty((count, 2))
        z = ground_z + m + hh * (u[:, 1] + 1) / 2
        for i, (k, (u0, u1)) in enumerate(zip(pick, u)):
            f = faces[k]
            if f == 0:
                local[i] = [hl, u0 * hw]
            elif f == 2:
                local[i] = [-hl, u0 * hw]
            elif f == 1:
                local[i] = [u0 * hl, hw]
            else:
                local[i] = [u0 * hl, -hw]
    xy = center + local @ rot.T
    heading = np.array([math.cos(yaw), math.sin(yaw)])
    rel = xy - ref
    vel = speed * heading + yaw_rate * np.column_stack([-rel[:, 1], rel[:, 0]])
    return np.column_stack([xy, z]), np.column_stack([vel, np.zeros(len(vel))])


# ---------------------------------------------------------------------------
# scenario generation
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    frames: list[RadarFrame]
    pose: PoseTrack
    truth: Calibration
    labels: list[tuple[int, int, str, int]]
    config: ScenarioConfig

    def truth_dict(self) -> dict[str, Any]:
        d = calibration_to_dict(self.truth)
        d["scenario_rpy_deg"] = list(self.config.truth_rpy_deg)
        return d


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))


def _build_objects(cfg: ScenarioConfig) -> list[_Object]:
    objs = []
    t = cfg.start_us + 1_000_000
    d = cfg.dims
    for i in range(cfg.passes):
        route = cfg.routes[i % len(cfg.routes)]
        path = Path2D(route)
        dur = int(round(path.length / route.speed * 1e6))
        objs.append(_Object(path, route.speed, t, t + dur, d.length, d.width, d.height, d.ref_offset, LABEL_VEHICLE, i))
        t += dur + int(round(cfg.pass_gap_s * 1e6))
    for j, b in enumerate(cfg.bystanders):
        path = Path2D(b.route)
        t0 = cfg.start_us + int(round(b.start_s * 1e6))
        dur = int(round(path.length / b.route.speed * 1e6))
        objs.append(
            _Object(path, b.route.speed, t0, t0 + dur, b.length, b.width, b.height, (0.0, 0.0, 0.0), LABEL_BYSTANDER, 1000 + j)
        )
    return objs


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    cfg.validate()
    R = cfg.truth_rotation
    t_sensor = np.asarray(cfg.sensor_position, dtype=float)
    sensor_xy = t_sensor[:2]
    objs = _build_objects(cfg)
    vehicles = [o for o in objs if o.label == LABEL_VEHICLE]
    end = max(o.t_end for o in objs) + 1_000_000
    az_lim, el_lim = math.radians(cfg.fov_az_deg), math.radians(cfg.fov_el_deg)
    sig_a = math.radians(cfg.sigma_angle_deg)
    ground = cfg.road_altitude
    ref_height = cfg.dims.height / 2 - cfg.dims.ref_offset[2]

    # poses on a global grid, only while a calibration pass is running
    period = 1e6 / cfg.pose_rate
    pt, pp, pr = [], [], []
    for o in vehicles:
        k0 = math.ceil((o.t_start - cfg.start_us) / period)
        k1 = math.floor((o.t_end - cfg.start_us) / period)
        for k in range(k0, k1 + 1):
            t = cfg.start_us + int(round(k * period))
            ref, yaw, _, _ = o.kinematics(t)
            pt.append(t)
            pp.append([ref[0], ref[1], ground + ref_height])
            pr.append([0.0, 0.0, yaw])
    pp = np.array(pp)
    abs_first = pp[0, :2] + [cfg.utm_easting, cfg.utm_northing]
    origin = UtmOrigin(cfg.utm_zone, math.floor(abs_first[0]), math.floor(abs_first[1]))
    shift = np.array([cfg.utm_easting - origin.easting, cfg.utm_northing - origin.northing, 0.0])
    pose = PoseTrack(np.array(pt, dtype=np.int64), pp + shift, np.array(pr), cfg.pose_rate, origin)

    frames, labels = [], []
    n_frames = int(math.floor((end - cfg.start_us) * cfg.radar_rate / 1e6)) + 1
    n_vehicle = 0
    for k in range(n_frames):
        t = cfg.start_us + int(round(k * 1e6 / cfg.radar_rate))
        rng_v = _rng(cfg.seed, STREAM_VEHICLE, k)
        rng_c = _rng(cfg.seed, STREAM_CLUTTER, k)
        rng_n = _rng(cfg.seed, STREAM_NOISE, k)
        pts, vel, lab = [], [], []
        for o in objs:
            if not o.active(t):
                continue
            p, v = vehicle_reflections(o, t, cfg, t_sensor, ground, rng_v)
            pts.append(p)
            vel.append(v)
            lab += [(o.label, o.obj_id)] * len(p)
        if pts:
            pw = np.concatenate(pts)
            vw = np.concatenate(vel)
            los = pw - t_sensor
            v_rad = np.einsum("ij,ij->i", vw, los) / np.linalg.norm(los, axis=1)
            ps = los @ R
            r, az, el = cartesian_to_spherical(ps)
        else:
            r = az = el = v_rad = np.zeros(0)
        rcs = 10.0 + 3.0 * rng_n.standard_normal(len(r))
        r = r + cfg.sigma_range * rng_n.standard_normal(len(r))
        az = az + sig_a * rng_n.standard_normal(len(r))
        el = el + sig_a * rng_n.standard_normal(len(r))
        v_rad = v_rad + cfg.sigma_v * rng_n.standard_normal(len(r))

        n_clutter = int(rng_c.poisson(cfg.clutter_rate)) if cfg.clutter_rate > 0 else 0
        moving = rng_c.uniform(size=n_clutter) < 0.5
        cr = rng_c.uniform(5.0, min(cfg.fov_r_max, 120.0), n_clutter)
        caz = rng_c.uniform(-az_lim, az_lim, n_clutter)
        cel = rng_c.uniform(-el_lim, el_lim, n_clutter)
        cv = np.where(moving, rng_c.uniform(-15.0, 15.0, n_clutter), cfg.sigma_v * rng_c.standard_normal(n_clutter))
        crcs = rng_c.normal(0.0, 5.0, n_clutter)
        lab += [(LABEL_MOVING if m else LABEL_STATIC, -1) for m in moving]

        r = np.concatenate([r, cr])
        az = np.concatenate([az, caz])
        el = np.concatenate([el, cel])
        v_rad = np.concatenate([v_rad, cv])
        rcs = np.concatenate([rcs, crcs])
        p = spherical_to_cartesian(r, az, el).reshape(-1, 3)
        keep = fov_filter(p, az_lim, el_lim, cfg.fov_r_min, cfg.fov_r_max) & (r > 0)
        keep = np.atleast_1d(keep)
        idx = np.flatnonzero(keep)
        frames.append(RadarFrame(t, p[idx], v_rad[idx], rcs[idx]))
        for j, i in enumerate(idx):
            labels.append((t, j, lab[i][0], lab[i][1]))
            n_vehicle += lab[i][0] == LABEL_VEHICLE
    if n_vehicle == 0:
        raise ScenarioError("calibration vehicle never enters the sensor field of view")
    truth = Calibration(R, t_sensor + shift, euler_to_rotation(*np.radians(cfg.truth_rpy_deg[:2]), 0.0), origin)
    return Scenario(frames, pose, truth, labels, cfg)


def write_scenario(sc: Scenario, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "radar": out / "radar.jsonl",
        "pose": out / "pose.csv",
        "truth": out / "truth.json",
        "labels": out / "labels.csv",
    }
    write_radar_log(paths["radar"], sc.frames)
    write_pose_log(paths["pose"], sc.pose)
    paths["truth"].write_text(json.dumps(sc.truth_dict(), indent=2) + "\n", encoding="utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_us", "target_index", "label", "object_id"])
    w.writerows(sc.labels)
    paths["labels"].write_text(buf.getvalue(), encoding="utf-8")
    return paths
