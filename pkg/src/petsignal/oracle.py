"""Reference generators and brute-force checkers.

Nothing in the main pipeline imports this module. The PET reference here
tests every (T1, T2) footprint pair with its own polygon-touch routine
(vertex containment plus edge crossing), so it shares no intersection
code with the separating-axis path it is used to check.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
import pandas as pd

from .conflicts import ConflictRecord
from .errors import OracleSizeError, ScriptError
from .geometry import centroid_of, pose_corners
from .trajectory import VehicleTrack

FT_PER_S_TO_MPH = 3600.0 / 5280.0

MAX_ORACLE_VEHICLES = 20
MAX_ORACLE_STEPS = 1000


@dataclass(frozen=True)
class Waypoint:
    t: float
    x: float
    y: float
    heading: float | None = None


@dataclass(frozen=True)
class VehicleScript:
    vehicle_id: int
    length: float
    width: float
    lane: int
    waypoints: tuple[Waypoint, ...]


@dataclass(frozen=True)
class ExpectedConflict:
    leader: int
    lagger: int
    min_pet: float
    tol: float


@dataclass(frozen=True)
class ScenarioScript:
    scenario_id: str
    vehicles: tuple[VehicleScript, ...]
    expected: tuple[ExpectedConflict, ...] = ()
    description: str = ""
    # when set, pairs absent from ``expected`` must produce no records
    exclusive: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioScript":
        try:
            vehicles = tuple(
                VehicleScript(
                    vehicle_id=int(v["id"]),
                    length=float(v["length"]),
                    width=float(v["width"]),
                    lane=int(v.get("lane", 0)),
                    waypoints=tuple(
                        Waypoint(float(w["t"]), float(w["x"]), float(w["y"]), w.get("heading"))
                        for w in v["waypoints"]
                    ),
                )
                for v in d["vehicles"]
            )
            expected = tuple(
                ExpectedConflict(int(e["leader"]), int(e["lagger"]), float(e["min_pet"]), float(e.get("tol", 1 / 3)))
                for e in d.get("expected", [])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScriptError(f"malformed scenario script: {exc}") from exc
        for e in expected:
            if not 0 < e.min_pet <= 5:
                raise ScriptError(f"expected pet {e.min_pet} outside (0, 5]")
        return cls(
            scenario_id=str(d.get("id", "scenario")),
            vehicles=vehicles,
            expected=expected,
            description=d.get("description", ""),
            exclusive=bool(d.get("exclusive", True)),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.scenario_id,
            "description": self.description,
            "exclusive": self.exclusive,
            "vehicles": [
                {
                    "id": v.vehicle_id,
                    "length": v.length,
                    "width": v.width,
                    "lane": v.lane,
                    "waypoints": [
                        {k: val for k, val in (("t", w.t), ("x", w.x), ("y", w.y), ("heading", w.heading)) if val is not None}
                        for w in v.waypoints
                    ],
                }
                for v in self.vehicles
            ],
            "expected": [
                {"leader": e.leader, "lagger": e.lagger, "min_pet": e.min_pet, "tol": e.tol} for e in self.expected
            ],
        }


def load_scenario(path) -> ScenarioScript:
    return ScenarioScript.from_dict(json.loads(Path(path).read_text()))


def _vehicle_track(v: VehicleScript, rate: float) -> VehicleTrack | None:
    wp = v.waypoints
    if len(wp) < 2:
        raise ScriptError(f"vehicle {v.vehicle_id}: need at least two waypoints")
    t = np.array([w.t for w in wp])
    if np.any(np.diff(t) <= 0):
        raise ScriptError(f"vehicle {v.vehicle_id}: waypoint times must be strictly increasing")
    xy = np.array([[w.x, w.y] for w in wp])
    seg = np.diff(xy, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    seg_heading = np.degrees(np.arctan2(seg[:, 0], seg[:, 1])) % 360.0
    # stationary segments inherit the nearest moving heading unless a waypoint fixes it
    moving = np.flatnonzero(seg_len > 0)
    for i in range(len(seg)):
        if wp[i].heading is not None:
            seg_heading[i] = float(wp[i].heading) % 360.0
        elif seg_len[i] == 0:
            if len(moving) == 0:
                seg_heading[i] = 0.0
            else:
                seg_heading[i] = seg_heading[moving[np.argmin(np.abs(moving - i))]]
    seg_speed = seg_len / np.diff(t) * FT_PER_S_TO_MPH

    k = np.arange(math.ceil(t[0] * rate - 1e-9), math.floor(t[-1] * rate + 1e-9) + 1)
    if len(k) == 0:
        return None
    times = k / float(rate)
    seg_idx = np.clip(np.searchsorted(t, times, side="right") - 1, 0, len(seg) - 1)
    centers = np.stack([np.interp(times, t, xy[:, 0]), np.interp(times, t, xy[:, 1])], axis=1)
    heading = seg_heading[seg_idx]
    corners = pose_corners(centers, v.length, v.width, heading)
    return VehicleTrack(
        vehicle_id=v.vehicle_id,
        times=times,
        corners=corners,
        speeds=seg_speed[seg_idx],
        headings=heading,
        lanes=np.full(len(times), v.lane),
        rate=rate,
        centers=centers,
    )


def generate_scenario(script: ScenarioScript, rate: float = 3.0) -> list[VehicleTrack]:
    """Rigid-body tracks on the shared ``k / rate`` grid, moving straight between waypoints."""
    ids = [v.vehicle_id for v in script.vehicles]
    if len(set(ids)) != len(ids):
        raise ScriptError("duplicate vehicle ids in script")
    tracks = [_vehicle_track(v, rate) for v in script.vehicles]
    return [t for t in tracks if t is not None]


# --- independent polygon touch test -------------------------------------------------


def _orient(p, q, r):
    return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])


def _inside(points, quad):
    """Closed containment of points (m, k, 2) in convex quads (m, 4, 2) of either winding."""
    nxt = np.roll(quad, -1, axis=1)
    s = np.stack([_orient(quad[:, None, i], nxt[:, None, i], points) for i in range(4)], axis=-1)
    return (s >= 0).all(-1) | (s <= 0).all(-1)


def _segments_touch(p1, p2, q1, q2):
    o1, o2 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    o3, o4 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    general = (o1 * o2 <= 0) & (o3 * o4 <= 0)
    collinear = (o1 == 0) & (o2 == 0)
    box = (
        (np.minimum(p1[..., 0], p2[..., 0]) <= np.maximum(q1[..., 0], q2[..., 0]))
        & (np.minimum(q1[..., 0], q2[..., 0]) <= np.maximum(p1[..., 0], p2[..., 0]))
        & (np.minimum(p1[..., 1], p2[..., 1]) <= np.maximum(q1[..., 1], q2[..., 1]))
        & (np.minimum(q1[..., 1], q2[..., 1]) <= np.maximum(p1[..., 1], p2[..., 1]))
    )
    return np.where(collinear, box, general)


def quads_touch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise closed intersection of convex quads ``(m, 4, 2)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    hit = _inside(a, b).any(-1) | _inside(b, a).any(-1)
    an, bn = np.roll(a, -1, axis=1), np.roll(b, -1, axis=1)
    for i in range(4):
        for j in range(4):
            hit |= _segments_touch(a[:, i], an[:, i], b[:, j], bn[:, j])
    return hit


def brute_force_pets(tracks: Sequence[VehicleTrack], pet_max: float = 5.0) -> list[ConflictRecord]:
    """Exhaustive PET reference over all ordered pairs and all (T1, T2) sample pairs."""
    tracks = sorted(tracks, key=lambda t: t.vehicle_id)
    if len(tracks) > MAX_ORACLE_VEHICLES or any(len(t) > MAX_ORACLE_STEPS for t in tracks):
        raise OracleSizeError(
            f"brute-force reference is limited to {MAX_ORACLE_VEHICLES} vehicles x {MAX_ORACLE_STEPS} steps"
        )
    out: list[ConflictRecord] = []
    for lead in tracks:
        for lag in tracks:
            if lead is lag:
                continue
            if lead.rate != lag.rate:
                raise ScriptError("tracks sampled at different rates")
            rate = lead.rate
            max_gap = int(math.floor(pet_max * rate + 1e-9))
            s1 = np.rint(lead.times * rate).astype(np.int64)
            s2 = np.rint(lag.times * rate).astype(np.int64)
            i1, i2 = np.meshgrid(np.arange(len(lead)), np.arange(len(lag)), indexing="ij")
            i1, i2 = i1.ravel(), i2.ravel()
            touch = quads_touch(lead.corners[i1], lag.corners[i2]).reshape(len(lead), len(lag))
            gap = s2[None, :] - s1[:, None]
            for j in range(len(lag)):
                if np.any(touch[:, j] & (gap[:, j] == 0)):
                    continue
                ok = touch[:, j] & (gap[:, j] >= 1) & (gap[:, j] <= max_gap)
                if not ok.any():
                    continue
                i = int(np.flatnonzero(ok)[np.argmin(gap[ok, j])])
                zone = centroid_of(lead.corners[i])
                out.append(
                    ConflictRecord(
                        lead.vehicle_id,
                        lag.vehicle_id,
                        float(lead.times[i]),
                        float(lag.times[j]),
                        float(gap[i, j] / rate),
                        float(zone[0]),
                        float(zone[1]),
                        int(lag.lanes[j]),
                        float(lag.speeds[j]),
                        float(lag.headings[j]),
                    )
                )
    out.sort(key=lambda r: (r.leader_id, r.lagger_id, r.t_enter))
    return out


# --- Monte Carlo footprint overlap ---------------------------------------------------


@numba.njit(cache=True)
def _frame_map(p, q):
    """Affine map from p's unit frame (a, b in [-1, 1]) to q's axis coordinates."""
    sp, cp = math.sin(math.radians(p[4])), math.cos(math.radians(p[4]))
    sq, cq = math.sin(math.radians(q[4])), math.cos(math.radians(q[4]))
    # forward axis (sin h, cos h), lateral axis (cos h, -sin h)
    ux, uy = 0.5 * p[2] * sp, 0.5 * p[2] * cp
    vx, vy = 0.5 * p[3] * cp, -0.5 * p[3] * sp
    dx, dy = p[0] - q[0], p[1] - q[1]
    f = (dx * sq + dy * cq, ux * sq + uy * cq, vx * sq + vy * cq)
    l = (dx * cq - dy * sq, ux * cq - uy * sq, vx * cq - vy * sq)
    return f, l, 0.5 * q[2], 0.5 * q[3]


@numba.njit(cache=True)
def _corner_hit(p, q):
    f, l, hl, hw = _frame_map(p, q)
    for a, b in ((1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)):
        if abs(f[0] + a * f[1] + b * f[2]) <= hl and abs(l[0] + a * l[1] + b * l[2]) <= hw:
            return True
    return False


@numba.njit(cache=True)
def _mc_kernel(pa, pb, n_samples, seed):
    m = pa.shape[0]
    out = np.zeros(m, dtype=np.bool_)
    state = np.uint64(seed * 2654435761 + 88172645463325252)
    mult = np.uint64(2685821657736338717)
    scale = 1.0 / 9007199254740992.0
    for k in range(m):
        # corners of each box are always tested: a shallow corner poke has too
        # little area to be found by uniform sampling
        if _corner_hit(pa[k], pb[k]) or _corner_hit(pb[k], pa[k]):
            out[k] = True
            continue
        f, l, hl, hw = _frame_map(pa[k], pb[k])
        for _ in range(n_samples):
            state ^= state >> np.uint64(12)
            state ^= state << np.uint64(25)
            state ^= state >> np.uint64(27)
            a = 2.0 * float((state * mult) >> np.uint64(11)) * scale - 1.0
            state ^= state >> np.uint64(12)
            state ^= state << np.uint64(25)
            state ^= state >> np.uint64(27)
            b = 2.0 * float((state * mult) >> np.uint64(11)) * scale - 1.0
            if abs(f[0] + a * f[1] + b * f[2]) <= hl and abs(l[0] + a * l[1] + b * l[2]) <= hw:
                out[k] = True
                break
    return out


def mc_poses_overlap(poses_a, poses_b, n_samples: int = 100_000, seed: int = 0) -> np.ndarray:
    """Monte Carlo overlap of rectangles given as ``(cx, cy, length, width, heading_deg)`` rows.

    Points are drawn in each rectangle's own frame and tested against the
    other rectangle by projection, never touching corner polygons or
    separating axes.
    """
    pa = np.ascontiguousarray(poses_a, dtype=np.float64).reshape(-1, 5)
    pb = np.ascontiguousarray(poses_b, dtype=np.float64).reshape(-1, 5)
    if pa.shape != pb.shape:
        raise ScriptError("pose arrays must have the same shape")
    return _mc_kernel(pa, pb, int(n_samples), int(seed))


# --- random traffic scenes -------------------------------------------------------------

_APPROACH = 240.0


def _lane_paths() -> dict[int, np.ndarray]:
    A = _APPROACH
    return {
        # through lanes, phases 2/6/4/8 style layout
        1: np.array([[-A, -6.0], [A, -6.0]]),  # eastbound
        2: np.array([[A, 6.0], [-A, 6.0]]),  # westbound
        3: np.array([[6.0, -A], [6.0, A]]),  # northbound
        4: np.array([[-6.0, A], [-6.0, -A]]),  # southbound
        # left-turn lanes cross the opposing through lanes on a diagonal
        5: np.array([[-A, -1.0], [-20.0, -1.0], [4.0, 20.0], [4.0, A]]),  # eastbound -> north
        6: np.array([[A, 1.0], [20.0, 1.0], [-4.0, -20.0], [-4.0, -A]]),  # westbound -> south
        7: np.array([[1.0, -A], [1.0, -20.0], [-20.0, 4.0], [-A, 4.0]]),  # northbound -> west
        8: np.array([[-1.0, A], [-1.0, 20.0], [20.0, -4.0], [A, -4.0]]),  # southbound -> east
    }


LANE_PATHS = _lane_paths()


def _script_vehicle(vid: int, lane: int, t0: float, speed: float, length: float, width: float) -> VehicleScript:
    path = LANE_PATHS[lane]
    seg = np.hypot(*np.diff(path, axis=0).T)
    times = t0 + np.r_[0.0, np.cumsum(seg)] / speed
    return VehicleScript(
        vehicle_id=vid,
        length=length,
        width=width,
        lane=lane,
        waypoints=tuple(Waypoint(float(tt), float(x), float(y)) for tt, (x, y) in zip(times, path)),
    )


def _tracks_overlap(a: VehicleTrack, b: VehicleTrack) -> bool:
    common, ia, ib = np.intersect1d(a.steps, b.steps, return_indices=True)
    if len(common) == 0:
        return False
    return bool(quads_touch(a.corners[ia], b.corners[ib]).any())


def random_scene(
    seed: int,
    n_vehicles: int = 12,
    duration: float = 60.0,
    rate: float = 3.0,
    lanes: Sequence[int] = tuple(range(1, 9)),
    max_attempts: int = 2000,
) -> ScenarioScript:
    """Random straight/left-turn traffic through a four-leg intersection.

    Candidate vehicles whose footprints would co-occupy space with an
    already accepted vehicle at a common timestep are rejected, so the
    scene never contains physical overlaps.
    """
    rng = np.random.default_rng(seed)
    accepted: list[VehicleScript] = []
    tracks: list[VehicleTrack] = []
    attempts = 0
    while len(accepted) < n_vehicles and attempts < max_attempts:
        attempts += 1
        v = _script_vehicle(
            vid=len(accepted) + 1,
            lane=int(rng.choice(lanes)),
            t0=float(rng.uniform(0.0, duration)),
            speed=float(rng.uniform(18.0, 50.0)),
            length=float(rng.uniform(13.0, 19.0)),
            width=float(rng.uniform(5.5, 7.0)),
        )
        tr = _vehicle_track(v, rate)
        if tr is None or any(_tracks_overlap(tr, other) for other in tracks):
            continue
        accepted.append(v)
        tracks.append(tr)
    return ScenarioScript(scenario_id=f"random-{seed}", vehicles=tuple(accepted), exclusive=False)


# --- ordered-response data ----------------------------------------------------------------


def simulate_ordered_data(
    params_true,
    spec,
    n_groups: int,
    obs_per_group: int,
    seed: int,
) -> pd.DataFrame:
    """Draw a panel from the random-parameter ordered logit.

    Covariates are uniform on (-1, 1); each group gets its own normal
    coefficient draw; responses come from thresholding a logistic latent
    variable. ``params_true`` is an ``OrderedParams``.
    """
    if n_groups < 1 or obs_per_group < 1:
        raise ScriptError("n_groups and obs_per_group must be at least 1")
    rng = np.random.default_rng(seed)
    names = list(spec.fixed) + list(spec.random)
    n = n_groups * obs_per_group
    X = rng.uniform(-1.0, 1.0, size=(n, len(names)))
    group = np.repeat(np.arange(n_groups), obs_per_group)
    beta = np.array([params_true.beta[c] for c in names], dtype=float)
    sig = np.zeros(len(names))
    for k, c in enumerate(names):
        sig[k] = params_true.sigma.get(c, 0.0)
    omega = rng.standard_normal((n_groups, len(names)))
    beta_i = beta[None, :] + sig[None, :] * omega
    eta = params_true.constant + np.einsum("nk,nk->n", X, beta_i[group])
    u = rng.uniform(size=n)
    latent = eta + np.log(u) - np.log1p(-u)
    cuts = np.asarray(params_true.thresholds, dtype=float)
    y = 1 + np.searchsorted(cuts, latent, side="left")
    df = pd.DataFrame(X, columns=names)
    df.insert(0, spec.group_key, group)
    df.insert(0, spec.response, y.astype(np.int64))
    return df
