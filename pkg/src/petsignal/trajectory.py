"""Trajectory ingestion, validation and resampling."""
from __future__ import annotations

import csv
import io
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import pandas as pd

from .errors import InvalidInputError, SchemaError
from .geometry import OrientedBox, Point2, centroid_of, normalize_corner_stack, points_in_boxes, pose_corners

CORNER_COLUMNS = tuple(f"corner{i}_{ax}" for i in range(1, 5) for ax in ("x", "y"))
CANONICAL_COLUMNS = ("frame", "vehicle_id", *CORNER_COLUMNS, "speed_mph", "heading_deg", "lane_id")


class TrackSample(NamedTuple):
    time: float
    center: Point2
    box: OrientedBox
    speed: float
    heading: float
    lane_id: int


@dataclass(frozen=True)
class SchemaConfig:
    """Maps table columns to trajectory roles.

    Either ``corners`` (eight column names, x/y for corners 1..4) or
    ``center`` (x and y columns) must be set. Pose input also needs
    ``vehicle_length`` and ``vehicle_width`` in source units; there is no
    built-in default footprint.
    """

    frame: str = "frame"
    vehicle_id: str = "vehicle_id"
    corners: tuple[str, ...] | None = CORNER_COLUMNS
    center: tuple[str, str] | None = None
    speed: str = "speed_mph"
    heading: str = "heading_deg"
    lane: str = "lane_id"
    frame_rate: float = 30.0
    length_scale: float = 1.0  # source length unit -> feet
    speed_scale: float = 1.0  # source speed unit -> mph
    vehicle_length: float | None = None
    vehicle_width: float | None = None

    def __post_init__(self) -> None:
        if (self.corners is None) == (self.center is None):
            raise SchemaError("schema must define exactly one of 'corners' or 'center'")
        if self.corners is not None and len(self.corners) != 8:
            raise SchemaError("'corners' must list 8 columns (x, y for each of 4 corners)")
        if self.center is not None and (self.vehicle_length is None or self.vehicle_width is None):
            raise SchemaError("pose input requires vehicle_length and vehicle_width in the schema")
        if not self.frame_rate > 0:
            raise SchemaError("frame_rate must be positive")

    @property
    def required_columns(self) -> list[str]:
        geo = list(self.corners) if self.corners is not None else list(self.center)
        return [self.frame, self.vehicle_id, *geo, self.speed, self.heading, self.lane]

    @classmethod
    def from_dict(cls, d: dict) -> "SchemaConfig":
        d = dict(d)
        for key in ("corners", "center"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if "center" in d and "corners" not in d:
            d["corners"] = None
        return cls(**d)


CANONICAL_SCHEMA = SchemaConfig()

# Column names used by the CitySim drone trajectory releases (feet variants).
CITYSIM_SCHEMA = SchemaConfig(
    frame="frameNum",
    vehicle_id="carId",
    corners=tuple(f"boundingBox{i}{ax}ft" for i in range(1, 5) for ax in ("X", "Y")),
    speed="speed",
    heading="heading",
    lane="laneId",
)

SCHEMAS = {"canonical": CANONICAL_SCHEMA, "citysim": CITYSIM_SCHEMA}


@dataclass
class IngestReport:
    vehicles_loaded: int = 0
    samples_loaded: int = 0
    rows_rejected: int = 0
    reasons: Counter = field(default_factory=Counter)

    def reject(self, reason: str, count: int = 1) -> None:
        if count:
            self.rows_rejected += count
            self.reasons[reason] += count

    def to_dict(self) -> dict:
        return {
            "vehicles_loaded": self.vehicles_loaded,
            "samples_loaded": self.samples_loaded,
            "rows_rejected": self.rows_rejected,
            "reasons": dict(sorted(self.reasons.items())),
        }


@dataclass(frozen=True, eq=False)
class VehicleTrack:
    """Time-ordered footprints of one vehicle, stored column-wise.

    ``rate`` is the nominal sampling rate in Hz; tracks are compared on the
    integer step grid ``round(time * rate)``.
    """

    vehicle_id: int
    times: np.ndarray
    corners: np.ndarray
    speeds: np.ndarray
    headings: np.ndarray
    lanes: np.ndarray
    rate: float
    centers: np.ndarray | None = None

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        n = len(times)
        if n == 0:
            raise InvalidInputError(f"vehicle {self.vehicle_id}: track is empty")
        if np.any(np.diff(times) <= 0):
            raise InvalidInputError(f"vehicle {self.vehicle_id}: sample times must be strictly increasing")
        corners, ok = normalize_corner_stack(np.asarray(self.corners, dtype=float).reshape(n, 4, 2))
        if not ok.all():
            raise InvalidInputError(f"vehicle {self.vehicle_id}: invalid footprint at sample {int(np.argmin(ok))}")
        speeds = np.asarray(self.speeds, dtype=float).reshape(n)
        if np.any(speeds < 0):
            raise InvalidInputError(f"vehicle {self.vehicle_id}: negative speed")
        centers = centroid_of(corners) if self.centers is None else np.asarray(self.centers, dtype=float).reshape(n, 2)
        if not points_in_boxes(centers, corners).all():
            raise InvalidInputError(f"vehicle {self.vehicle_id}: center outside footprint")
        if not self.rate > 0:
            raise InvalidInputError("rate must be positive")
        arrays = {
            "times": times,
            "corners": corners,
            "speeds": speeds,
            "headings": np.mod(np.asarray(self.headings, dtype=float).reshape(n), 360.0),
            "lanes": np.asarray(self.lanes).reshape(n).astype(np.int64),
            "centers": centers,
        }
        for name, arr in arrays.items():
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "vehicle_id", int(self.vehicle_id))
        object.__setattr__(self, "rate", float(self.rate))

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VehicleTrack):
            return NotImplemented
        return (
            self.vehicle_id == other.vehicle_id
            and self.rate == other.rate
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("times", "corners", "speeds", "headings", "lanes", "centers")
            )
        )

    @property
    def steps(self) -> np.ndarray:
        return np.rint(self.times * self.rate).astype(np.int64)

    @property
    def samples(self) -> list[TrackSample]:
        return [self.sample(i) for i in range(len(self))]

    def sample(self, i: int) -> TrackSample:
        return TrackSample(
            time=float(self.times[i]),
            center=Point2(*map(float, self.centers[i])),
            box=OrientedBox(self.corners[i]),
            speed=float(self.speeds[i]),
            heading=float(self.headings[i]),
            lane_id=int(self.lanes[i]),
        )

    def take(self, idx: np.ndarray, times: np.ndarray | None = None, rate: float | None = None) -> "VehicleTrack":
        return VehicleTrack(
            vehicle_id=self.vehicle_id,
            times=self.times[idx] if times is None else times,
            corners=self.corners[idx],
            speeds=self.speeds[idx],
            headings=self.headings[idx],
            lanes=self.lanes[idx],
            rate=self.rate if rate is None else rate,
            centers=self.centers[idx],
        )


def _read_table(source) -> pd.DataFrame:
    if isinstance(source, pd.DataFrame):
        return source.copy()
    try:
        if isinstance(source, (str, os.PathLike)) and not Path(source).exists():
            raise FileNotFoundError(f"trajectory file not found: {source}")
        return pd.read_csv(source, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        return pd.DataFrame()


def load_tracks(source, schema: SchemaConfig = CANONICAL_SCHEMA) -> tuple[list[VehicleTrack], IngestReport]:
    """Read a per-frame trajectory table into one track per vehicle id.

    Malformed rows are dropped and tallied in the report; a missing
    mandatory column raises ``SchemaError``; unreadable sources raise
    ``OSError``.
    """
    df = _read_table(source)
    report = IngestReport()
    if df.empty and len(df.columns) == 0:
        return [], report
    missing = [c for c in schema.required_columns if c not in df.columns]
    if missing:
        raise SchemaError(f"missing mandatory column(s): {', '.join(missing)}")

    cols = schema.required_columns
    num = df[cols].apply(pd.to_numeric, errors="coerce")
    ok = num.notna().all(axis=1).to_numpy()
    report.reject("missing_or_non_numeric", int((~ok).sum()))

    frame = num[schema.frame].to_numpy()
    vid = num[schema.vehicle_id].to_numpy()
    lane = num[schema.lane].to_numpy()
    integral = ok & (frame == np.round(frame)) & (vid == np.round(vid)) & (lane == np.round(lane))
    report.reject("non_integer_label", int((ok & ~integral).sum()))
    ok = integral

    speed = num[schema.speed].to_numpy() * schema.speed_scale
    neg = ok & (speed < 0)
    report.reject("negative_speed", int(neg.sum()))
    ok &= ~neg

    heading = num[schema.heading].to_numpy()
    if schema.corners is not None:
        corners = num[list(schema.corners)].to_numpy().reshape(-1, 4, 2) * schema.length_scale
        centers = None
    else:
        centers = num[list(schema.center)].to_numpy() * schema.length_scale
        corners = pose_corners(
            centers,
            schema.vehicle_length * schema.length_scale,
            schema.vehicle_width * schema.length_scale,
            heading,
        )
    corners = np.where(ok[:, None, None], corners, 0.0)
    corners, valid_box = normalize_corner_stack(corners)
    bad_box = ok & ~valid_box
    report.reject("degenerate_box", int(bad_box.sum()))
    ok &= valid_box

    keep = pd.DataFrame({"frame": frame, "vid": vid, "row": np.arange(len(df))})[ok]
    dup = keep.duplicated(subset=["vid", "frame"], keep="first")
    report.reject("duplicate_frame", int(dup.sum()))
    keep = keep[~dup]
    if keep.empty:
        return [], report

    frames_int = keep["frame"].to_numpy().astype(np.int64)
    origin = int(frames_int.min())
    keep = keep.assign(frame=frames_int).sort_values(["vid", "frame"], kind="mergesort")

    tracks = []
    for v, grp in keep.groupby("vid", sort=True):
        rows = grp["row"].to_numpy()
        times = (grp["frame"].to_numpy() - origin) / float(schema.frame_rate)
        tracks.append(
            VehicleTrack(
                vehicle_id=int(v),
                times=times,
                corners=corners[rows],
                speeds=speed[rows],
                headings=heading[rows],
                lanes=lane[rows],
                rate=schema.frame_rate,
                centers=None if centers is None else centers[rows],
            )
        )
    report.vehicles_loaded = len(tracks)
    report.samples_loaded = int(sum(len(t) for t in tracks))
    return tracks, report


def write_tracks(tracks: Iterable[VehicleTrack], dest, frame_rate: float = 30.0) -> None:
    """Write tracks in the canonical corner schema (frames at ``frame_rate``)."""
    own = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", newline="") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANONICAL_COLUMNS)
        for tr in sorted(tracks, key=lambda t: t.vehicle_id):
            frames = np.rint(tr.times * frame_rate).astype(np.int64)
            for i in range(len(tr)):
                w.writerow(
                    [int(frames[i]), tr.vehicle_id]
                    + [repr(float(v)) for v in tr.corners[i].ravel()]
                    + [repr(float(tr.speeds[i])), repr(float(tr.headings[i])), int(tr.lanes[i])]
                )
    finally:
        if own:
            fh.close()


def tracks_to_csv_text(tracks: Iterable[VehicleTrack], frame_rate: float = 30.0) -> str:
    buf = io.StringIO()
    write_tracks(tracks, buf, frame_rate)
    return buf.getvalue()


def resample_track(track: VehicleTrack, rate: float) -> VehicleTrack:
    """Pick the nearest original sample for each grid time ``k / rate``.

    The grid is anchored at the recording origin so every resampled track
    shares one step lattice. A grid time is kept only if some original
    sample lies within half an original frame interval; payloads are
    copied, never interpolated.
    """
    if not rate > 0:
        raise InvalidInputError("rate must be positive")
    t = track.times
    half = 0.5 / track.rate + 1e-9
    k_lo = math.ceil(t[0] * rate - 1e-9)
    k_hi = math.floor(t[-1] * rate + 1e-9)
    grid = np.arange(k_lo, k_hi + 1) / float(rate)
    if len(grid) == 0:
        raise InvalidInputError(f"vehicle {track.vehicle_id}: no grid point inside the observed interval")
    right = np.clip(np.searchsorted(t, grid, side="left"), 0, len(t) - 1)
    left = np.clip(right - 1, 0, len(t) - 1)
    # ties go to the earlier sample
    pick = np.where(np.abs(t[left] - grid) <= np.abs(t[right] - grid), left, right)
    keep = np.abs(t[pick] - grid) <= half
    if not keep.any():
        raise InvalidInputError(f"vehicle {track.vehicle_id}: no samples near the {rate} Hz grid")
    return track.take(pick[keep], times=grid[keep], rate=float(rate))


def resample_tracks(tracks: Iterable[VehicleTrack], rate: float) -> list[VehicleTrack]:
    out = []
    for tr in tracks:
        try:
            out.append(resample_track(tr, rate))
        except InvalidInputError:
            # a track too short to hit the grid carries no analysable samples
            continue
    return out
