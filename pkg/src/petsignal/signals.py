"""Signal plans as per-phase interval timelines, queried as countdown timers.

Intervals are half-open ``[start, end)``. Inside the library an inactive
interval type is ``None``; the ``-1`` sentinel only appears in exported
records.
"""
from __future__ import annotations

import bisect
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import OutOfRangeError, PlanParseError, SchemaError

STATES = ("green", "yellow", "red_clearance", "all_red", "red")
PHASES = tuple(range(1, 9))
# a phase counts as active while serving or clearing traffic
DEFAULT_ACTIVE_STATES = frozenset({"green", "yellow", "red_clearance", "all_red"})
SENTINEL = -1.0


@dataclass(frozen=True)
class PhaseInterval:
    phase: int
    state: str
    start: float
    end: float


@dataclass(frozen=True)
class SignalPlan:
    intervals: tuple[PhaseInterval, ...]
    frame_rate_reference: float | None = None
    _timelines: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        by_phase: dict[int, list[PhaseInterval]] = {}
        for iv in self.intervals:
            by_phase.setdefault(iv.phase, []).append(iv)
        timelines = {}
        for ph, ivs in sorted(by_phase.items()):
            ivs = sorted(ivs, key=lambda i: i.start)
            _check_timeline(ph, ivs)
            timelines[ph] = (tuple(ivs), [i.start for i in ivs])
        object.__setattr__(self, "_timelines", timelines)

    @property
    def phases_present(self) -> frozenset[int]:
        return frozenset(self._timelines)

    def timeline(self, phase: int) -> tuple[PhaseInterval, ...]:
        return self._timelines[phase][0]

    @property
    def horizon(self) -> tuple[float, float]:
        """Window in which every present phase has a defined state."""
        if not self._timelines:
            return (0.0, 0.0)
        start = max(ivs[0].start for ivs, _ in self._timelines.values())
        end = min(ivs[-1].end for ivs, _ in self._timelines.values())
        return (start, end)

    def state_at(self, phase: int, t: float) -> PhaseInterval:
        ivs, starts = self._timelines[phase]
        k = bisect.bisect_right(starts, t) - 1
        if k < 0 or t >= ivs[k].end:
            raise OutOfRangeError(f"t={t} outside the timeline of phase {phase}")
        return ivs[k]


def _check_timeline(phase: int, ivs: list[PhaseInterval]) -> None:
    if phase not in PHASES:
        raise SchemaError(f"phase {phase} outside 1..8")
    for iv in ivs:
        if iv.state not in STATES:
            raise PlanParseError(f"phase {phase}: unknown state {iv.state!r}")
        if not iv.start < iv.end:
            raise SchemaError(f"phase {phase}: empty interval {iv}")
    for prev, cur in zip(ivs, ivs[1:]):
        if cur.start < prev.end:
            raise SchemaError(f"phase {phase}: interval {cur} overlaps {prev}")
        if cur.start > prev.end:
            raise SchemaError(f"phase {phase}: gap between {prev} and {cur}")


@dataclass(frozen=True)
class PhaseState:
    state: str
    remaining: float


@dataclass(frozen=True)
class SignalSnapshot:
    time: float
    phases: Mapping[int, PhaseState]

    def countdowns(self, phase: int) -> dict[str, float | None]:
        """Remaining seconds per interval type; ``None`` for inactive types."""
        ps = self.phases[phase]
        return {s: (ps.remaining if s == ps.state else None) for s in STATES}

    def to_record(self) -> dict:
        """Flat export with -1 sentinels, e.g. ``phase2_yellow``."""
        out: dict = {"time": self.time}
        for ph in sorted(self.phases):
            out[f"phase{ph}_state"] = self.phases[ph].state
            for s, v in self.countdowns(ph).items():
                out[f"phase{ph}_{s}"] = SENTINEL if v is None else v
        return out


def _load_source(source) -> dict:
    if isinstance(source, Mapping):
        return dict(source)
    if isinstance(source, str) and source.lstrip().startswith("{"):
        text = source
    elif isinstance(source, (str, os.PathLike)) and Path(source).exists():
        text = Path(source).read_text()
    elif isinstance(source, (str, os.PathLike)):
        raise FileNotFoundError(f"signal plan not found: {source}")
    else:
        text = source.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlanParseError(f"signal plan is not valid JSON: {exc}") from exc


def parse_signal_plan(source) -> SignalPlan:
    """Build a validated plan from a JSON path, JSON text, open file or dict.

    Expected layout: ``{"frame_rate_reference": 30, "phases": [{"phase": 2,
    "intervals": [{"state": "green", "start": 0, "end": 30}, ...]}]}``.
    """
    doc = _load_source(source)
    if not isinstance(doc.get("phases"), list):
        raise SchemaError("signal plan needs a 'phases' list")
    intervals = []
    seen = set()
    for entry in doc["phases"]:
        try:
            phase = int(entry["phase"])
            raw = entry["intervals"]
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanParseError(f"bad phase entry {entry!r}") from exc
        if phase in seen:
            raise SchemaError(f"phase {phase} listed twice")
        seen.add(phase)
        for iv in raw:
            try:
                state = str(iv["state"]).lower()
                start, end = float(iv["start"]), float(iv["end"])
            except (KeyError, TypeError, ValueError) as exc:
                raise PlanParseError(f"phase {phase}: bad interval {iv!r}") from exc
            intervals.append(PhaseInterval(phase, state, start, end))
    frr = doc.get("frame_rate_reference")
    return SignalPlan(tuple(intervals), None if frr is None else float(frr))


def serialize_plan(plan: SignalPlan) -> dict:
    return {
        "frame_rate_reference": plan.frame_rate_reference,
        "phases": [
            {
                "phase": ph,
                "intervals": [{"state": iv.state, "start": iv.start, "end": iv.end} for iv in plan.timeline(ph)],
            }
            for ph in sorted(plan.phases_present)
        ],
    }


def write_signal_plan(plan: SignalPlan, path) -> None:
    Path(path).write_text(json.dumps(serialize_plan(plan), indent=2) + "\n")


def snapshot_at(plan: SignalPlan, t: float) -> SignalSnapshot:
    h0, h1 = plan.horizon
    if not h0 <= t < h1:
        raise OutOfRangeError(f"t={t} outside plan horizon [{h0}, {h1})")
    phases = {}
    for ph in sorted(plan.phases_present):
        iv = plan.state_at(ph, t)
        phases[ph] = PhaseState(iv.state, iv.end - t)
    return SignalSnapshot(float(t), phases)


def active_phase_indicators(
    snapshot: SignalSnapshot, active_states: Iterable[str] = DEFAULT_ACTIVE_STATES
) -> tuple[int, ...]:
    """Eight 0/1 flags, one per phase 1..8; absent phases read as 0."""
    active = frozenset(active_states)
    unknown = active - set(STATES)
    if unknown:
        raise PlanParseError(f"unknown state(s) in activity definition: {sorted(unknown)}")
    return tuple(
        int(ph in snapshot.phases and snapshot.phases[ph].state in active) for ph in PHASES
    )


def repeat_cycle(
    pattern: Mapping[int, Sequence[tuple[str, float]]],
    n_cycles: int,
    start: float = 0.0,
    frame_rate_reference: float | None = None,
) -> SignalPlan:
    """Tile a one-cycle pattern of ``(state, duration)`` per phase ``n_cycles`` times.

    Every phase pattern must have the same total length.
    """
    lengths = {ph: sum(d for _, d in seq) for ph, seq in pattern.items()}
    if len(set(lengths.values())) > 1:
        raise SchemaError(f"phase cycle lengths differ: {lengths}")
    intervals = []
    for ph, seq in pattern.items():
        t = start
        for _ in range(n_cycles):
            for state, dur in seq:
                intervals.append(PhaseInterval(ph, state, t, t + dur))
                t += dur
    return SignalPlan(tuple(_merge_adjacent(intervals)), frame_rate_reference)


def _merge_adjacent(intervals: list[PhaseInterval]) -> list[PhaseInterval]:
    out: list[PhaseInterval] = []
    for iv in sorted(intervals, key=lambda i: (i.phase, i.start)):
        if out and out[-1].phase == iv.phase and out[-1].state == iv.state and out[-1].end == iv.start:
            out[-1] = PhaseInterval(iv.phase, iv.state, out[-1].start, iv.end)
        else:
            out.append(iv)
    return out
