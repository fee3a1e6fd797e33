"""Post-encroachment-time conflicts between vehicle footprints.

For an ordered pair (leader, lagger) and every lagger timestep T2, the
conflict zone is the latest earlier leader footprint that the lagger's
current footprint touches. PET is the step gap between the two, kept when
it is within ``pet_max`` and the two vehicles do not co-occupy space at T2.
"""
from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import Point2, centroid_of, intersects_many
from .trajectory import VehicleTrack

DEFAULT_THRESHOLDS = (1.0, 2.0, 3.0, 4.0, 5.0)

# Published counts for the University@Alafaya one-hour recording at 3 Hz,
# used only for side-by-side reporting. Conflict counts are rounded to 1K.
REFERENCE_PET_COUNTS = (9_000, 62_000, 106_000, 150_000, 193_000)
REFERENCE_MINPET_COUNTS = (717, 2785, 4365, 5897, 7345)
REFERENCE_CENTER_MINPET_COUNTS = {1.0: 141, 3.0: 3637}

CONFLICT_COLUMNS = (
    "leader_id",
    "lagger_id",
    "t_leave",
    "t_enter",
    "pet",
    "zone_x",
    "zone_y",
    "lagger_lane",
    "lagger_speed",
    "lagger_heading",
)


class ConflictRecord(NamedTuple):
    leader_id: int
    lagger_id: int
    t_leave: float
    t_enter: float
    pet: float
    zone_x: float
    zone_y: float
    lagger_lane: int
    lagger_speed: float
    lagger_heading: float

    @property
    def zone_center(self) -> Point2:
        return Point2(self.zone_x, self.zone_y)

    @property
    def pair(self) -> tuple[int, int]:
        return self.leader_id, self.lagger_id


class MinPetRecord(NamedTuple):
    leader_id: int
    lagger_id: int
    min_pet: float
    zone_x: float
    zone_y: float
    time: float

    @property
    def zone_center(self) -> Point2:
        return Point2(self.zone_x, self.zone_y)


@dataclass
class DetectionResult:
    records: list[ConflictRecord]
    overlap_events: int
    candidate_pairs: int


def _lookback_steps(pet_max: float, rate: float) -> int:
    if not pet_max > 0:
        raise InvalidInputError("pet_max must be positive")
    return int(math.floor(pet_max * rate + 1e-9))


def _scan_pair(leader: VehicleTrack, lagger: VehicleTrack, pet_max: float) -> tuple[list[ConflictRecord], int]:
    if leader.rate != lagger.rate:
        raise InvalidInputError(
            f"tracks {leader.vehicle_id} and {lagger.vehicle_id} are sampled at different rates "
            f"({leader.rate} vs {lagger.rate} Hz)"
        )
    rate = leader.rate
    lookback = _lookback_steps(pet_max, rate)
    ls, gs = leader.steps, lagger.steps
    sel = np.flatnonzero((gs >= ls[0]) & (gs <= ls[-1] + lookback))
    if len(sel) == 0:
        return [], 0
    g_corners = lagger.corners[sel]
    n = len(sel)
    first_hit = np.zeros(n, dtype=np.int64)  # 0 means no earlier footprint touched yet
    hit_pos = np.full(n, -1, dtype=np.int64)
    co_occupied = np.zeros(n, dtype=bool)
    for d in range(lookback + 1):
        target = gs[sel] - d
        pos = np.searchsorted(ls, target)
        present = pos < len(ls)
        present[present] &= ls[pos[present]] == target[present]
        todo = present if d == 0 else present & (first_hit == 0) & ~co_occupied
        if not todo.any():
            continue
        idx = np.flatnonzero(todo)
        hits = intersects_many(leader.corners[pos[idx]], g_corners[idx])
        if d == 0:
            co_occupied[idx[hits]] = True
        else:
            first_hit[idx[hits]] = d
            hit_pos[idx[hits]] = pos[idx[hits]]
    emit = (first_hit > 0) & ~co_occupied
    overlaps = int(co_occupied.sum())
    records = []
    zones = centroid_of(leader.corners[hit_pos[emit]]) if emit.any() else np.empty((0, 2))
    for k, i in enumerate(np.flatnonzero(emit)):
        j = sel[i]
        records.append(
            ConflictRecord(
                leader_id=leader.vehicle_id,
                lagger_id=lagger.vehicle_id,
                t_leave=float(leader.times[hit_pos[i]]),
                t_enter=float(lagger.times[j]),
                pet=float(first_hit[i] / rate),
                zone_x=float(zones[k, 0]),
                zone_y=float(zones[k, 1]),
                lagger_lane=int(lagger.lanes[j]),
                lagger_speed=float(lagger.speeds[j]),
                lagger_heading=float(lagger.headings[j]),
            )
        )
    return records, overlaps


def compute_pet_sequence(leader: VehicleTrack, lagger: VehicleTrack, pet_max: float = 5.0) -> list[ConflictRecord]:
    """PET records for one ordered pair, one per lagger timestep in a conflict zone."""
    return _scan_pair(leader, lagger, pet_max)[0]


def _candidate_pairs(tracks: Sequence[VehicleTrack], lookback: int) -> list[tuple[int, int]]:
    """Unordered index pairs whose footprints can meet within the lookback window.

    Each track is cut into windows of ``lookback + 1`` steps; a window's
    item is the axis-aligned hull of its footprints. Items are hashed into
    a uniform grid keyed by (cell, window); only items sharing a cell in
    the same or adjacent window and with overlapping hulls are paired.
    """
    width = lookback + 1
    items = []  # (track index, window, xmin, ymin, xmax, ymax)
    for ti, tr in enumerate(tracks):
        win = tr.steps // width
        starts = np.flatnonzero(np.r_[True, win[1:] != win[:-1]])
        lo = tr.corners.min(axis=1)
        hi = tr.corners.max(axis=1)
        mins = np.minimum.reduceat(lo, starts, axis=0)
        maxs = np.maximum.reduceat(hi, starts, axis=0)
        for k, s in enumerate(starts):
            items.append((ti, int(win[s]), *mins[k], *maxs[k]))
    if not items:
        return []
    arr = np.array([it[2:] for it in items])
    extent = np.maximum(arr[:, 2] - arr[:, 0], arr[:, 3] - arr[:, 1])
    cell = max(float(np.median(extent)), 1.0)

    grid: dict[tuple[int, int, int], list[int]] = defaultdict(list)
    for idx, (ti, w, x0, y0, x1, y1) in enumerate(items):
        for ix in range(math.floor(x0 / cell), math.floor(x1 / cell) + 1):
            for iy in range(math.floor(y0 / cell), math.floor(y1 / cell) + 1):
                grid[(ix, iy, w)].append(idx)

    def hull_overlap(a: int, b: int) -> bool:
        A, B = items[a], items[b]
        return A[2] <= B[4] and B[2] <= A[4] and A[3] <= B[5] and B[3] <= A[5]

    pairs: set[tuple[int, int]] = set()
    for (ix, iy, w), members in grid.items():
        neighbours = grid.get((ix, iy, w + 1), [])
        for pos, a in enumerate(members):
            for b in members[pos + 1 :] + neighbours:
                ta, tb = items[a][0], items[b][0]
                if ta == tb:
                    continue
                pair = (ta, tb) if ta < tb else (tb, ta)
                if pair not in pairs and hull_overlap(a, b):
                    pairs.add(pair)
    return sorted(pairs)


def run_detection(
    tracks: Sequence[VehicleTrack],
    pet_max: float = 5.0,
    *,
    broad_phase: bool = True,
    threads: int = 1,
) -> DetectionResult:
    tracks = sorted(tracks, key=lambda t: t.vehicle_id)
    if not tracks:
        return DetectionResult([], 0, 0)
    rates = {t.rate for t in tracks}
    if len(rates) > 1:
        raise InvalidInputError(f"tracks must share one sampling rate, found {sorted(rates)}")
    lookback = _lookback_steps(pet_max, tracks[0].rate)
    if broad_phase:
        pairs = _candidate_pairs(tracks, lookback)
    else:
        pairs = [(i, j) for i in range(len(tracks)) for j in range(i + 1, len(tracks))]

    def work(pair: tuple[int, int]) -> tuple[list[ConflictRecord], int]:
        a, b = tracks[pair[0]], tracks[pair[1]]
        r1, o1 = _scan_pair(a, b, pet_max)
        r2, o2 = _scan_pair(b, a, pet_max)
        return r1 + r2, o1 + o2

    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, pairs))
    else:
        results = [work(p) for p in pairs]
    records = [r for recs, _ in results for r in recs]
    records.sort(key=lambda r: (r.leader_id, r.lagger_id, r.t_enter))
    return DetectionResult(records, sum(o for _, o in results), len(pairs))


def detect_conflicts(
    tracks: Sequence[VehicleTrack],
    pet_max: float = 5.0,
    *,
    broad_phase: bool = True,
    threads: int = 1,
) -> list[ConflictRecord]:
    """All PET records over every ordered vehicle pair, sorted by (leader, lagger, t_enter)."""
    return run_detection(tracks, pet_max, broad_phase=broad_phase, threads=threads).records


def center_square_tracks(tracks: Iterable[VehicleTrack], epsilon: float) -> list[VehicleTrack]:
    """Replace every footprint with an axis-aligned square of side ``2 * epsilon`` at the center.

    ``epsilon`` must keep the square inside every real footprint, i.e. at
    most ``min_width / (2 * sqrt(2))`` since the square may sit at any angle
    to the vehicle.
    """
    tracks = list(tracks)
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")
    if tracks:
        sides = [np.hypot(*(np.roll(t.corners, -1, axis=1) - t.corners).transpose(2, 0, 1)) for t in tracks]
        min_width = float(min(s.min() for s in sides))
        bound = min_width / (2.0 * math.sqrt(2.0))
        if epsilon > bound:
            raise InvalidInputError(
                f"epsilon {epsilon} ft exceeds the containment bound {bound:.4f} ft "
                f"(minimum vehicle width {min_width:.4f} ft)"
            )
    offsets = epsilon * np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    out = []
    for t in tracks:
        sq = t.centers[:, None, :] + offsets[None]
        out.append(
            VehicleTrack(
                vehicle_id=t.vehicle_id,
                times=t.times,
                corners=sq,
                speeds=t.speeds,
                headings=t.headings,
                lanes=t.lanes,
                rate=t.rate,
                centers=t.centers,
            )
        )
    return out


def center_point_conflicts(
    tracks: Sequence[VehicleTrack],
    pet_max: float = 5.0,
    epsilon: float = 0.5,
    *,
    broad_phase: bool = True,
    threads: int = 1,
) -> list[ConflictRecord]:
    """Center-point baseline: the same PET scan on small squares at vehicle centers."""
    return detect_conflicts(center_square_tracks(tracks, epsilon), pet_max, broad_phase=broad_phase, threads=threads)


def min_pets(records: Iterable[ConflictRecord]) -> list[MinPetRecord]:
    """Smallest PET per ordered pair; ties go to the earliest lagger time."""
    best: dict[tuple[int, int], ConflictRecord] = {}
    for r in records:
        cur = best.get(r.pair)
        if cur is None or (r.pet, r.t_enter) < (cur.pet, cur.t_enter):
            best[r.pair] = r
    return [
        MinPetRecord(r.leader_id, r.lagger_id, r.pet, r.zone_x, r.zone_y, r.t_enter)
        for _, r in sorted(best.items())
    ]


def _pet_value(item) -> float:
    if isinstance(item, ConflictRecord):
        return item.pet
    if isinstance(item, MinPetRecord):
        return item.min_pet
    return float(item)


def threshold_counts(items: Iterable, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> list[int]:
    """Cumulative number of items with PET strictly below each threshold."""
    th = [float(t) for t in thresholds]
    if any(b <= a for a, b in zip(th, th[1:])):
        raise InvalidInputError("thresholds must be strictly increasing")
    values = np.sort(np.array([_pet_value(i) for i in items], dtype=float))
    return [int(np.searchsorted(values, t, side="left")) for t in th]


@dataclass
class HeatmapGrid:
    origin: Point2
    cell_size: float
    counts: np.ndarray  # rows along y, columns along x
    overflow: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.overflow


def heatmap_extent(tracks: Iterable[VehicleTrack], cell_size: float) -> tuple[Point2, tuple[int, int]]:
    """Grid origin and (rows, cols) covering every footprint corner."""
    tracks = list(tracks)
    if not cell_size > 0:
        raise InvalidInputError("cell_size must be positive")
    if not tracks:
        return Point2(0.0, 0.0), (1, 1)
    lo = np.min([t.corners.min(axis=(0, 1)) for t in tracks], axis=0)
    hi = np.max([t.corners.max(axis=(0, 1)) for t in tracks], axis=0)
    x0 = math.floor(lo[0] / cell_size) * cell_size
    y0 = math.floor(lo[1] / cell_size) * cell_size
    nx = int(math.floor((hi[0] - x0) / cell_size)) + 1
    ny = int(math.floor((hi[1] - y0) / cell_size)) + 1
    return Point2(float(x0), float(y0)), (ny, nx)


def build_heatmap(
    records: Iterable[MinPetRecord],
    origin: Sequence[float],
    cell_size: float,
    pet_threshold: float,
    shape: tuple[int, int],
) -> HeatmapGrid:
    """Bin minPET locations below ``pet_threshold``; out-of-grid hits go to ``overflow``."""
    if not cell_size > 0:
        raise InvalidInputError("cell_size must be positive")
    ny, nx = shape
    counts = np.zeros((ny, nx), dtype=np.int64)
    overflow = 0
    ox, oy = float(origin[0]), float(origin[1])
    for r in records:
        if not _pet_value(r) < pet_threshold:
            continue
        ix = math.floor((r.zone_x - ox) / cell_size)
        iy = math.floor((r.zone_y - oy) / cell_size)
        if 0 <= ix < nx and 0 <= iy < ny:
            counts[iy, ix] += 1
        else:
            overflow += 1
    return HeatmapGrid(Point2(ox, oy), float(cell_size), counts, overflow)


def write_heatmap(grid: HeatmapGrid, path, extra_header: dict | None = None) -> None:
    ny, nx = grid.counts.shape
    with open(path, "w") as fh:
        fh.write(f"# origin {grid.origin.x!r} {grid.origin.y!r}\n")
        fh.write(f"# cell_size {grid.cell_size!r}\n")
        fh.write(f"# shape {ny} {nx}\n")
        fh.write(f"# overflow {grid.overflow}\n")
        for k, v in (extra_header or {}).items():
            fh.write(f"# {k} {v}\n")
        for row in grid.counts:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def read_heatmap(path) -> HeatmapGrid:
    header = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, *vals = line[1:].split()
                header[key] = vals
            elif line.strip():
                rows.append([int(v) for v in line.split()])
    ny, nx = map(int, header["shape"])
    counts = np.array(rows, dtype=np.int64).reshape(ny, nx)
    return HeatmapGrid(
        Point2(float(header["origin"][0]), float(header["origin"][1])),
        float(header["cell_size"][0]),
        counts,
        int(header["overflow"][0]),
    )


def write_conflicts(records: Iterable[ConflictRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONFLICT_COLUMNS)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def read_conflicts(path) -> list[ConflictRecord]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"conflict file not found: {path}")
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CONFLICT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            from .errors import SchemaError

            raise SchemaError(f"conflict table missing column(s): {', '.join(missing)}")
        for row in reader:
            out.append(
                ConflictRecord(
                    leader_id=int(row["leader_id"]),
                    lagger_id=int(row["lagger_id"]),
                    t_leave=float(row["t_leave"]),
                    t_enter=float(row["t_enter"]),
                    pet=float(row["pet"]),
                    zone_x=float(row["zone_x"]),
                    zone_y=float(row["zone_y"]),
                    lagger_lane=int(row["lagger_lane"]),
                    lagger_speed=float(row["lagger_speed"]),
                    lagger_heading=float(row["lagger_heading"]),
                )
            )
    return out


def write_min_pets(records: Iterable[MinPetRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MinPetRecord._fields)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def comparison_table(
    measured_pet: Sequence[int],
    measured_min: Sequence[int],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> str:
    """Side-by-side text block of measured counts against the published study counts."""
    lines = [f"{'threshold':>10} {'pet':>9} {'ref_pet':>9} {'delta':>9} {'minpet':>8} {'ref_min':>8} {'delta':>7}"]
    for t, p, rp, m, rm in zip(thresholds, measured_pet, REFERENCE_PET_COUNTS, measured_min, REFERENCE_MINPET_COUNTS):
        lines.append(f"{'<' + format(t, 'g') + 's':>10} {p:>9} {rp:>9} {p - rp:>+9} {m:>8} {rm:>8} {m - rm:>+7}")
    return "\n".join(lines)
