"""Extrinsic calibration of roadside radar sensors from a localized test vehicle."""

from .core import Calibration, PipelineError, RadarFrame, RadarTarget, UtmOrigin, VehicleDims, VehiclePose

__version__ = "0.1.0"

__all__ = [
    "Calibration",
    "PipelineError",
    "RadarFrame",
    "RadarTarget",
    "UtmOrigin",
    "VehicleDims",
    "VehiclePose",
    "__version__",
]
