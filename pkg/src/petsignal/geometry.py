"""Oriented vehicle footprints and exact overlap predicates.

All coordinates are in feet. Headings are degrees clockwise from north
(+y), so heading 90 points along +x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError


class Point2(NamedTuple):
    x: float
    y: float


def _signed_area(corners: np.ndarray) -> float:
    x, y = corners[:, 0], corners[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True, eq=False)
class OrientedBox:
    """Convex quadrilateral footprint with counterclockwise corners."""

    corners: np.ndarray

    def __post_init__(self) -> None:
        c = np.array(self.corners, dtype=float)
        if c.shape != (4, 2):
            raise InvalidInputError(f"box needs 4 corners of 2 coordinates, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InvalidInputError("box corners must be finite")
        area = _signed_area(c)
        if area < 0:
            c = c[::-1].copy()
        if not (abs(area) > 0):
            raise InvalidInputError("degenerate box: zero area")
        edges = np.roll(c, -1, axis=0) - c
        turns = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if not np.all(turns > 0):
            raise InvalidInputError("box corners do not form a convex quadrilateral")
        c.flags.writeable = False
        object.__setattr__(self, "corners", c)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OrientedBox):
            return NotImplemented
        return bool(np.array_equal(self.corners, other.corners))

    def __hash__(self) -> int:
        return hash(self.corners.tobytes())

    def __repr__(self) -> str:
        pts = ", ".join(f"({x:.3f}, {y:.3f})" for x, y in self.corners)
        return f"OrientedBox([{pts}])"

    @property
    def centroid(self) -> Point2:
        return Point2(*centroid_of(self.corners))

    @property
    def area(self) -> float:
        return _signed_area(self.corners)

    @property
    def side_lengths(self) -> np.ndarray:
        return np.hypot(*(np.roll(self.corners, -1, axis=0) - self.corners).T)

    @property
    def width(self) -> float:
        return float(self.side_lengths.min())

    @property
    def length(self) -> float:
        return float(self.side_lengths.max())


def centroid_of(corners: np.ndarray) -> np.ndarray:
    """Vertex mean; equals the area centroid for parallelograms."""
    return corners.mean(axis=-2)


def box_from_pose(center: Sequence[float], length: float, width: float, heading: float) -> OrientedBox:
    """Rectangle of ``length`` x ``width`` centred on ``center``, long axis along ``heading``."""
    if not (length > 0 and width > 0):
        raise InvalidInputError(f"box dimensions must be positive, got length={length}, width={width}")
    return OrientedBox(pose_corners(np.asarray(center, dtype=float), length, width, heading))


def pose_corners(center: np.ndarray, length, width, heading) -> np.ndarray:
    """Vectorised corner construction; broadcasts over leading dimensions.

    Returns corners in counterclockwise order with shape ``(..., 4, 2)``.
    """
    h = np.radians(np.asarray(heading, dtype=float))
    # forward unit vector and its right-hand normal
    fx, fy = np.sin(h), np.cos(h)
    rx, ry = np.cos(h), -np.sin(h)
    hl = np.asarray(length, dtype=float) / 2.0
    hw = np.asarray(width, dtype=float) / 2.0
    center = np.asarray(center, dtype=float)
    signs = ((1, -1), (1, 1), (-1, 1), (-1, -1))  # front-left, front-right, rear-right, rear-left
    pts = []
    for sl, sw in signs:
        x = center[..., 0] + sl * hl * fx + sw * hw * rx
        y = center[..., 1] + sl * hl * fy + sw * hw * ry
        pts.append(np.stack([x, y], axis=-1))
    out = np.stack(pts, axis=-2)
    # the order above is clockwise; flip to counterclockwise
    return out[..., ::-1, :]


def _as_corners(box) -> np.ndarray:
    if isinstance(box, OrientedBox):
        return box.corners
    return OrientedBox(box).corners


def intersects_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise closed overlap test for stacks of CCW convex quads.

    ``a`` and ``b`` have shape ``(n, 4, 2)`` (or broadcast to it). Uses the
    separating-axis criterion on the edge normals of both quads.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    edges = np.concatenate([np.roll(a, -1, axis=-2) - a, np.roll(b, -1, axis=-2) - b], axis=-2)
    axes = np.stack([edges[..., 1], -edges[..., 0]], axis=-1)  # (n, 8, 2)
    pa = np.einsum("...kd,...cd->...kc", axes, a)
    pb = np.einsum("...kd,...cd->...kc", axes, b)
    overlap = (pa.max(axis=-1) >= pb.min(axis=-1)) & (pb.max(axis=-1) >= pa.min(axis=-1))
    return overlap.all(axis=-1)


def boxes_intersect(a: OrientedBox, b: OrientedBox) -> bool:
    """True iff the closed footprints share at least one point."""
    return bool(intersects_many(_as_corners(a)[None], _as_corners(b)[None])[0])


def point_in_box(p: Sequence[float], b: OrientedBox) -> bool:
    c = _as_corners(b)
    px, py = float(p[0]), float(p[1])
    nxt = np.roll(c, -1, axis=0)
    cross = (nxt[:, 0] - c[:, 0]) * (py - c[:, 1]) - (nxt[:, 1] - c[:, 1]) * (px - c[:, 0])
    return bool(np.all(cross >= 0))


def _point_segment_distance(p: np.ndarray, s0: np.ndarray, s1: np.ndarray) -> np.ndarray:
    d = s1 - s0
    t = np.einsum("...d,...d->...", p - s0, d) / np.einsum("...d,...d->...", d, d)
    t = np.clip(t, 0.0, 1.0)
    proj = s0 + t[..., None] * d
    return np.hypot(*np.moveaxis(p - proj, -1, 0))


def box_gap(a: OrientedBox, b: OrientedBox) -> float:
    """Boundary-to-boundary separation; 0 when the footprints overlap or touch."""
    ca, cb = _as_corners(a), _as_corners(b)
    if intersects_many(ca[None], cb[None])[0]:
        return 0.0
    best = math.inf
    for p_set, poly in ((ca, cb), (cb, ca)):
        s0, s1 = poly, np.roll(poly, -1, axis=0)
        d = _point_segment_distance(p_set[:, None, :], s0[None], s1[None])
        best = min(best, float(d.min()))
    return best


def penetration_depth(a: OrientedBox, b: OrientedBox) -> float:
    """Minimum translation distance that separates two overlapping boxes (0 if disjoint)."""
    ca, cb = _as_corners(a), _as_corners(b)
    edges = np.concatenate([np.roll(ca, -1, axis=0) - ca, np.roll(cb, -1, axis=0) - cb])
    axes = np.stack([edges[:, 1], -edges[:, 0]], axis=-1)
    axes /= np.hypot(axes[:, 0], axes[:, 1])[:, None]
    pa, pb = axes @ ca.T, axes @ cb.T
    overlap = np.minimum(pa.max(1) - pb.min(1), pb.max(1) - pa.min(1))
    return float(max(overlap.min(), 0.0))


def signed_clearance(a: OrientedBox, b: OrientedBox) -> float:
    """Positive gap for disjoint boxes, negative penetration depth for overlapping ones."""
    gap = box_gap(a, b)
    return gap if gap > 0 else -penetration_depth(a, b)


def point_in_polygon(p: Sequence[float], polygon: Sequence[Sequence[float]]) -> bool:
    """Even-odd ray casting for simple (possibly non-convex) polygons; boundary counts as inside."""
    poly = np.asarray(polygon, dtype=float)
    if poly.ndim != 2 or poly.shape[0] < 3 or poly.shape[1] != 2:
        raise InvalidInputError("polygon needs at least three 2-D vertices")
    px, py = float(p[0]), float(p[1])
    inside = False
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        # on-segment check keeps the closed-region convention
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        if cross == 0 and min(x0, x1) <= px <= max(x0, x1) and min(y0, y1) <= py <= max(y0, y1):
            return True
        if (y0 > py) != (y1 > py):
            x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            if px < x_at:
                inside = not inside
    return inside


def normalize_corner_stack(corners: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Counterclockwise-normalise a stack of quads ``(n, 4, 2)``.

    Returns the reordered stack and a boolean mask of quads that are finite,
    strictly convex and of positive area.
    """
    c = np.array(corners, dtype=float)
    x, y = c[..., 0], c[..., 1]
    area = 0.5 * ((x * np.roll(y, -1, axis=-1)).sum(-1) - (np.roll(x, -1, axis=-1) * y).sum(-1))
    flip = area < 0
    c[flip] = c[flip][:, ::-1, :]
    e = np.roll(c, -1, axis=-2) - c
    en = np.roll(e, -1, axis=-2)
    turns = e[..., 0] * en[..., 1] - e[..., 1] * en[..., 0]
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(c).all(axis=(-1, -2)) & (turns > 0).all(axis=-1)
    return c, ok


def points_in_boxes(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Element-wise closed containment of ``points (n, 2)`` in CCW ``corners (n, 4, 2)``."""
    nxt = np.roll(corners, -1, axis=-2)
    p = points[..., None, :]
    cross = (nxt[..., 0] - corners[..., 0]) * (p[..., 1] - corners[..., 1]) - (
        nxt[..., 1] - corners[..., 1]
    ) * (p[..., 0] - corners[..., 0])
    return (cross >= 0).all(axis=-1)
