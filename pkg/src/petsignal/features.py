"""Join PET records with signal countdowns and trajectory context.

Produces one observation per usable conflict and routes it to the
dataset named after the governing phase's interval type at ``t_enter``.
"""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .conflicts import ConflictRecord
from .errors import InvalidInputError, OutOfRangeError, SchemaError
from .geometry import OrientedBox, box_gap, point_in_polygon
from .signals import DEFAULT_ACTIVE_STATES, PHASES, SENTINEL, STATES, SignalPlan, active_phase_indicators, snapshot_at
from .trajectory import VehicleTrack

BUNDLES = ("yellow", "all_red", "red_clearance", "red", "green")
VOLUME_BIN_SECONDS = 300.0
PET_FLOOR = 0.3
PET_CEILING = 5.0


def pet_level(pet: float) -> int | None:
    """Ordinal PET level 1..5, or ``None`` when outside [0.3, 5] s."""
    if not pet > 0:
        raise InvalidInputError(f"pet must be positive, got {pet}")
    if pet < PET_FLOOR or pet > PET_CEILING:
        return None
    return min(int(math.floor(pet)) + 1, 5)


def speeding_proportion(speed: float, limit: float) -> float:
    if not limit > 0:
        raise InvalidInputError(f"speed limit must be positive, got {limit}")
    return (speed - limit) / limit


class VolumeIndex:
    """Distinct vehicles per fixed 5-minute bin anchored at t=0."""

    def __init__(self, tracks: Iterable[VehicleTrack], bin_seconds: float = VOLUME_BIN_SECONDS):
        self.bin_seconds = bin_seconds
        counts: Counter = Counter()
        for tr in tracks:
            for b in np.unique(np.floor(tr.times / bin_seconds).astype(np.int64)):
                counts[int(b)] += 1
        self.counts = dict(counts)

    def __call__(self, t: float) -> int:
        if t < 0:
            raise InvalidInputError("t must be non-negative")
        return self.counts.get(int(math.floor(t / self.bin_seconds)), 0)


def volume_5min(tracks: Iterable[VehicleTrack], t: float) -> int:
    return VolumeIndex(tracks)(t)


@dataclass(frozen=True)
class FeatureConfig:
    speed_limit: float
    intersection_polygon: tuple[tuple[float, float], ...]
    lane_movement_map: Mapping[int, int]  # 0 left-turn lane, 1 through lane
    phase_of_lane: Mapping[int, int]
    distance_cap: float = 15.0
    active_states: frozenset = DEFAULT_ACTIVE_STATES

    def __post_init__(self) -> None:
        if not self.speed_limit > 0:
            raise InvalidInputError("speed_limit must be positive")
        if len(self.intersection_polygon) < 3:
            raise InvalidInputError("intersection_polygon needs at least three vertices")
        bad = {k: v for k, v in self.lane_movement_map.items() if v not in (0, 1)}
        if bad:
            raise InvalidInputError(f"lane movements must be 0 (left turn) or 1 (through): {bad}")
        bad = {k: v for k, v in self.phase_of_lane.items() if v not in PHASES}
        if bad:
            raise InvalidInputError(f"lane phases must be in 1..8: {bad}")
        if set(self.active_states) - set(STATES):
            raise InvalidInputError(f"unknown active states: {sorted(set(self.active_states) - set(STATES))}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureConfig":
        try:
            return cls(
                speed_limit=float(d["speed_limit"]),
                intersection_polygon=tuple(tuple(map(float, p)) for p in d["intersection_polygon"]),
                lane_movement_map={int(k): int(v) for k, v in d["lane_movement_map"].items()},
                phase_of_lane={int(k): int(v) for k, v in d["phase_of_lane"].items()},
                distance_cap=float(d.get("distance_cap", 15.0)),
                active_states=frozenset(d.get("active_states", sorted(DEFAULT_ACTIVE_STATES))),
            )
        except KeyError as exc:
            raise SchemaError(f"feature config missing key {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "speed_limit": self.speed_limit,
            "intersection_polygon": [list(p) for p in self.intersection_polygon],
            "lane_movement_map": {str(k): v for k, v in sorted(self.lane_movement_map.items())},
            "phase_of_lane": {str(k): v for k, v in sorted(self.phase_of_lane.items())},
            "distance_cap": self.distance_cap,
            "active_states": sorted(self.active_states),
            "governing_phase": "phase_of_lane[lagger_lane]",
            "volume_bin_seconds": VOLUME_BIN_SECONDS,
        }


@dataclass(frozen=True)
class ObservationRow:
    pair_id: str
    leader_id: int
    lagger_id: int
    t_enter: float
    pet: float
    pet_level: int
    distance: float
    red_clearance: float | None
    all_red: float | None
    red: float | None
    yellow: float | None
    green: float | None
    phase_1: int
    phase_2: int
    phase_3: int
    phase_4: int
    phase_5: int
    phase_6: int
    phase_7: int
    phase_8: int
    speed: float
    heading: float
    lane: int
    volume: int
    intersection: int
    speeding_prop: float
    movement: int

    def export(self) -> dict:
        d = asdict(self)
        for s in STATES:
            if d[s] is None:
                d[s] = SENTINEL
        return d


OBSERVATION_COLUMNS = tuple(f.name for f in fields(ObservationRow))


@dataclass
class DatasetBundle:
    datasets: dict[str, list[ObservationRow]] = field(default_factory=lambda: {b: [] for b in BUNDLES})
    rejected: list[tuple[ConflictRecord, str]] = field(default_factory=list)
    below_floor: int = 0

    def __getitem__(self, name: str) -> list[ObservationRow]:
        return self.datasets[name]

    def counts(self) -> dict[str, int]:
        return {b: len(self.datasets[b]) for b in BUNDLES}

    def rejection_summary(self) -> dict[str, int]:
        return dict(sorted(Counter(reason for _, reason in self.rejected).items()))


def _sample_at_or_before(track: VehicleTrack, t: float) -> int | None:
    i = int(np.searchsorted(track.times, t, side="right")) - 1
    return i if i >= 0 else None


def assemble_observations(
    records: Iterable[ConflictRecord],
    plan: SignalPlan,
    tracks: Sequence[VehicleTrack],
    config: FeatureConfig,
    volume: VolumeIndex | None = None,
) -> DatasetBundle:
    by_id = {t.vehicle_id: t for t in tracks}
    volume = volume or VolumeIndex(tracks)
    bundle = DatasetBundle()
    for rec in records:
        level = pet_level(rec.pet)
        if level is None:
            bundle.below_floor += 1
            continue
        lane = rec.lagger_lane
        if lane not in config.phase_of_lane or lane not in config.lane_movement_map:
            bundle.rejected.append((rec, f"lane {lane} missing from lane maps"))
            continue
        lead, lag = by_id.get(rec.leader_id), by_id.get(rec.lagger_id)
        if lead is None or lag is None:
            bundle.rejected.append((rec, "vehicle missing from trajectories"))
            continue
        try:
            snap = snapshot_at(plan, rec.t_enter)
        except OutOfRangeError:
            bundle.rejected.append((rec, "t_enter outside signal plan horizon"))
            continue
        phase = config.phase_of_lane[lane]
        if phase not in snap.phases:
            bundle.rejected.append((rec, f"governing phase {phase} absent from plan"))
            continue
        i_lag = _sample_at_or_before(lag, rec.t_enter)
        i_lead = _sample_at_or_before(lead, rec.t_enter)
        if i_lag is None or lag.times[i_lag] != rec.t_enter or i_lead is None:
            bundle.rejected.append((rec, "no trajectory sample at t_enter"))
            continue
        gap = box_gap(OrientedBox(lead.corners[i_lead]), OrientedBox(lag.corners[i_lag]))
        inside = int(point_in_polygon((rec.zone_x, rec.zone_y), config.intersection_polygon))
        cd = snap.countdowns(phase)
        flags = active_phase_indicators(snap, config.active_states)
        row = ObservationRow(
            pair_id=f"{rec.leader_id}-{rec.lagger_id}",
            leader_id=rec.leader_id,
            lagger_id=rec.lagger_id,
            t_enter=rec.t_enter,
            pet=rec.pet,
            pet_level=level,
            distance=min(gap, config.distance_cap),
            red_clearance=cd["red_clearance"],
            all_red=cd["all_red"],
            red=cd["red"],
            yellow=cd["yellow"],
            green=cd["green"],
            **{f"phase_{k}": flags[k - 1] for k in PHASES},
            speed=rec.lagger_speed,
            heading=rec.lagger_heading,
            lane=lane,
            volume=volume(rec.t_enter),
            intersection=inside,
            speeding_prop=speeding_proportion(float(lead.speeds[i_lead]), config.speed_limit),
            movement=2 if inside else config.lane_movement_map[lane],
        )
        bundle.datasets[snap.phases[phase].state].append(row)
    for rows in bundle.datasets.values():
        rows.sort(key=lambda r: (r.t_enter, r.leader_id, r.lagger_id))
    return bundle


def write_observations(rows: Iterable[ObservationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBSERVATION_COLUMNS)
        for r in rows:
            d = r.export()
            w.writerow([repr(v) if isinstance(v, float) else v for v in (d[c] for c in OBSERVATION_COLUMNS)])


def write_bundle(bundle: DatasetBundle, out_dir, config: FeatureConfig, extra_meta: dict | None = None) -> dict:
    """Write ``<bundle>.csv`` for all five datasets plus ``dataset_meta.json``; returns the metadata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in BUNDLES:
        write_observations(bundle[name], out / f"{name}.csv")
    meta = {
        "config": config.to_dict(),
        "counts": bundle.counts(),
        "excluded_pet_out_of_range": bundle.below_floor,
        "rejected": bundle.rejection_summary(),
        "sentinel": SENTINEL,
        **(extra_meta or {}),
    }
    (out / "dataset_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
