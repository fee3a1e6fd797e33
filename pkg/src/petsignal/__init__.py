"""Bounding-box PET conflict detection, signal countdown features and
random-parameter ordered logit estimation."""

from .errors import (
    ConfigError,
    InvalidInputError,
    OracleSizeError,
    OutOfRangeError,
    PetSignalError,
    PlanParseError,
    SchemaError,
    ScriptError,
)
from .geometry import OrientedBox, Point2, box_from_pose, boxes_intersect, point_in_box

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "InvalidInputError",
    "OracleSizeError",
    "OrientedBox",
    "OutOfRangeError",
    "PetSignalError",
    "PlanParseError",
    "Point2",
    "SchemaError",
    "ScriptError",
    "box_from_pose",
    "boxes_intersect",
    "point_in_box",
]
