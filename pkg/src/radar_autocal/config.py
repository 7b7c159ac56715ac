"""Flat ``key = value`` pipeline configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable

from .cluster import KMH, ClusterParams
from .core import VehicleDims
from .refine import RefineParams
from .track import NoiseSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    cluster_v_min_kmh: float = 0.1
    cluster_eps: float = 2.5
    cluster_min_pts: int = 3
    cluster_lambda_v: float = 1.0
    cluster_window: int = 3
    assoc_gate: float = 3.0
    assoc_max_gap: int = 3
    ground_radius: float = 1.0
    ground_keep_fraction: float = 0.2
    track_sigma_jerk: float = 2.0
    track_sigma_turn_acc: float = 0.5
    track_sigma_meas: float = 0.5
    track_min_length: int = 5
    hypothesis_elevation_mode: str = "zero"
    hypothesis_eps_t: float = 1.0
    hypothesis_min_pts: int = 2
    pose_max_dt_us: int = 50_000
    refine_enabled: bool = True
    refine_reject_threshold: float = 5.0
    refine_iterations: int = 3
    refine_smooth: bool = True
    refine_edge_distance: bool = False
    eval_reject_threshold: float = 5.0
    eval_height_margin: float = 0.5
    vehicle_length: float = 4.7
    vehicle_width: float = 1.9
    vehicle_height: float = 1.5
    vehicle_ref_offset_x: float = 1.4
    vehicle_ref_offset_y: float = 0.0
    vehicle_ref_offset_z: float = 0.45
    figures: bool = True
    verbosity: str = "warning"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = [
            "cluster_eps",
            "assoc_gate",
            "ground_radius",
            "track_sigma_meas",
            "hypothesis_eps_t",
            "refine_reject_threshold",
            "eval_reject_threshold",
            "vehicle_length",
            "vehicle_width",
            "vehicle_height",
            "pose_max_dt_us",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("cluster_min_pts", "cluster_window", "hypothesis_min_pts", "track_min_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.track_min_length < 2:
            raise ConfigError("track_min_length must be >= 2")
        if not 0 < self.ground_keep_fraction < 1:
            raise ConfigError("ground_keep_fraction must lie in (0, 1)")
        if min(self.cluster_v_min_kmh, self.cluster_lambda_v, self.track_sigma_jerk, self.track_sigma_turn_acc) < 0:
            raise ConfigError("speeds, weights and noise levels must be non-negative")
        if self.assoc_max_gap < 1 or self.refine_iterations < 1 or self.eval_height_margin < 0:
            raise ConfigError("assoc_max_gap and refine_iterations must be >= 1, eval_height_margin >= 0")
        if self.hypothesis_elevation_mode not in ("zero", "raw"):
            raise ConfigError("hypothesis_elevation_mode must be 'zero' or 'raw'")
        if self.verbosity not in ("debug", "info", "warning", "error"):
            raise ConfigError("verbosity must be debug, info, warning or error")

    # derived parameter bundles

    @property
    def cluster_params(self) -> ClusterParams:
        return ClusterParams(
            self.cluster_v_min_kmh * KMH, self.cluster_eps, self.cluster_min_pts, self.cluster_lambda_v, self.cluster_window
        )

    @property
    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.track_sigma_jerk, self.track_sigma_turn_acc, self.track_sigma_meas)

    @property
    def dims(self) -> VehicleDims:
        return VehicleDims(
            self.vehicle_length,
            self.vehicle_width,
            self.vehicle_height,
            (self.vehicle_ref_offset_x, self.vehicle_ref_offset_y, self.vehicle_ref_offset_z),
        )

    @property
    def refine_params(self) -> RefineParams:
        return RefineParams(
            reject_threshold=self.refine_reject_threshold,
            min_length=self.track_min_length,
            iterations=self.refine_iterations,
            smooth=self.refine_smooth,
            noise=self.noise,
            max_dt=self.pose_max_dt_us,
            edge_distance=self.refine_edge_distance,
        )

    # text format

    def with_overrides(self, items: Iterable[str]) -> "PipelineConfig":
        updates: dict[str, Any] = {}
        for item in items:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = (s.strip() for s in item.split("=", 1))
            updates[key] = _parse_value(key, value)
        return replace(self, **updates)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "PipelineConfig":
        updates: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in updates:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            try:
                updates[key] = _parse_value(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cls(**updates)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        return cls.parse(text, str(p))

    def dumps(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in asdict(self).items())


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(key: str, value: str) -> Any:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = value.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad {kind} value {value!r} for {key}") from None


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
