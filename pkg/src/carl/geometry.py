"""Small 2D geometry helpers shared by the map, dynamics and reward code."""

from __future__ import annotations

import numpy as np


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s], [s, c]])


def box_corners(x: float, y: float, yaw: float, half_length: float, half_width: float) -> np.ndarray:
    """Corners of an oriented box, counter-clockwise, starting front-left."""
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array(
        [
            [half_length, half_width],
            [-half_length, half_width],
            [-half_length, -half_width],
            [half_length, -half_width],
        ]
    )
    return local @ np.array([[c, s], [-s, c]]) + np.array([x, y])


def _project(corners: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    p = corners @ axis
    return p.min(), p.max()


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quads given as (4, 2) corner arrays.

    Touching boxes (zero-width contact) count as overlapping.
    """
    for corners in (a, b):
        edges = np.roll(corners, -1, axis=0) - corners
        for ex, ey in edges[:2]:
            axis = np.array([-ey, ex])
            amin, amax = _project(a, axis)
            bmin, bmax = _project(b, axis)
            if amax < bmin or bmax < amin:
                return False
    return True


def polyline_lengths(points: np.ndarray) -> np.ndarray:
    """Cumulative arc length at each vertex, starting at 0."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def interpolate_polyline(points: np.ndarray, cum: np.ndarray, s) -> np.ndarray:
    """Positions at arc lengths ``s`` along a polyline with cumulative lengths ``cum``."""
    s = np.asarray(s, dtype=float)
    return np.stack([np.interp(s, cum, points[:, 0]), np.interp(s, cum, points[:, 1])], axis=-1)


def resample_polyline(points: np.ndarray, spacing: float, total: float | None = None) -> np.ndarray:
    """Resample at fixed arc-length spacing from the first vertex.

    ``total`` truncates the output at that arc length (it must not exceed the
    polyline length).
    """
    cum = polyline_lengths(points)
    end = cum[-1] if total is None else total
    n = int(np.floor(end / spacing + 1e-9)) + 1
    return interpolate_polyline(points, cum, np.arange(n) * spacing)


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance from point ``p`` to segments ``a[i]-b[i]`` and the clamped segment parameter."""
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.einsum("ij,ij->i", p - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(p - closest, axis=1), t


def points_in_convex(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Inclusive point-in-convex-polygon test for either vertex winding."""
    edges = np.roll(poly, -1, axis=0) - poly
    rel = points[:, None, :] - poly[None, :, :]
    cross = edges[None, :, 0] * rel[..., 1] - edges[None, :, 1] * rel[..., 0]
    return np.all(cross >= -1e-12, axis=1) | np.all(cross <= 1e-12, axis=1)


def segments_cross(p0: np.ndarray, p1: np.ndarray, a: np.ndarray, b: np.ndarray) -> bool:
    """True if segment p0-p1 properly intersects or touches segment a-b."""

    def orient(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])

    d1, d2 = orient(a, b, p0), orient(a, b, p1)
    d3, d4 = orient(p0, p1, a), orient(p0, p1, b)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and ((d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)):
        return True

    def on_seg(u, v, w):
        return min(u[0], v[0]) - 1e-12 <= w[0] <= max(u[0], v[0]) + 1e-12 and min(u[1], v[1]) - 1e-12 <= w[1] <= max(u[1], v[1]) + 1e-12

    return (
        (d1 == 0 and on_seg(a, b, p0))
        or (d2 == 0 and on_seg(a, b, p1))
        or (d3 == 0 and on_seg(p0, p1, a))
        or (d4 == 0 and on_seg(p0, p1, b))
    )
