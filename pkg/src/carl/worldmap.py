"""Lane-graph maps, route generation and arc-length route progress."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml
from shapely import contains_xy
from shapely.geometry import Polygon
from shapely.ops import unary_union
from shapely.prepared import prep

from carl.geometry import interpolate_polyline, point_segment_distance, polyline_lengths

ROUTE_SPACING = 1.0
ROUTE_RETRIES = 100
LANE_CHANGE_LENGTH = 12.0
DECISION_INTERVAL = 20.0


class MapError(ValueError):
    """Raised for malformed or inconsistent map documents."""


class RouteError(RuntimeError):
    """Raised when no valid route can be sampled within the retry budget."""


@dataclass
class Lane:
    id: str
    centerline: np.ndarray
    width: float
    speed_limit: float
    successors: list[str] = field(default_factory=list)
    left: Optional[str] = None
    right: Optional[str] = None
    in_intersection: bool = False
    direction_group: str = ""

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=float)
        self.cum = polyline_lengths(self.centerline)

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def point_at(self, s):
        return interpolate_polyline(self.centerline, self.cum, s)

    def heading_at(self, s: float) -> float:
        i = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.cum) - 2))
        d = self.centerline[i + 1] - self.centerline[i]
        return math.atan2(d[1], d[0])

    def project(self, point: np.ndarray) -> tuple[float, float]:
        """Arc length and unsigned distance of the closest centerline point."""
        dist, t = point_segment_distance(point, self.centerline[:-1], self.centerline[1:])
        i = int(np.argmin(dist))
        return float(self.cum[i] + t[i] * (self.cum[i + 1] - self.cum[i])), float(dist[i])

    def slice(self, s0: float, s1: float) -> np.ndarray:
        inner = self.centerline[(self.cum > s0) & (self.cum < s1)]
        return np.vstack([self.point_at(s0), inner, self.point_at(s1)])


@dataclass
class TrafficLight:
    id: str
    stop_line: np.ndarray
    lane: str
    schedule: list[tuple[str, float]]
    offset: float = 0.0

    @property
    def cycle(self) -> float:
        return sum(d for _, d in self.schedule)

    def state(self, t: float) -> str:
        u = (t + self.offset) % self.cycle
        for phase, duration in self.schedule:
            if u < duration:
                return phase
            u -= duration
        return self.schedule[-1][0]


@dataclass
class StopSign:
    id: str
    trigger: np.ndarray
    lane: str


@dataclass
class LaneQuery:
    lane: Lane
    s: float
    distance: float


@dataclass
class MapGraph:
    lanes: dict[str, Lane]
    drivable_polygons: list[Polygon]
    sidewalk_polygons: list[Polygon]
    traffic_lights: list[TrafficLight]
    stop_signs: list[StopSign]
    junctions: list[Polygon] = field(default_factory=list)
    document: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.drivable = unary_union(self.drivable_polygons) if self.drivable_polygons else Polygon()
        self.sidewalks = unary_union(self.sidewalk_polygons) if self.sidewalk_polygons else Polygon()
        self._drivable_prep = prep(self.drivable)
        self.lane_ids = list(self.lanes)
        a, b, idx, s0 = [], [], [], []
        for k, lane in enumerate(self.lanes.values()):
            a.append(lane.centerline[:-1])
            b.append(lane.centerline[1:])
            idx.append(np.full(len(lane.centerline) - 1, k))
            s0.append(lane.cum[:-1])
        self.seg_a = np.vstack(a)
        self.seg_b = np.vstack(b)
        self.seg_lane = np.concatenate(idx)
        self.seg_s0 = np.concatenate(s0)
        self.seg_width = np.array([self.lanes[self.lane_ids[k]].width for k in self.seg_lane])
        self.seg_mid = 0.5 * (self.seg_a + self.seg_b)

    def is_drivable(self, x: float, y: float) -> bool:
        return bool(contains_xy(self.drivable, x, y))

    def on_sidewalk(self, x: float, y: float) -> bool:
        return bool(contains_xy(self.sidewalks, x, y)) if not self.sidewalks.is_empty else False

    def segment_distances(self, point) -> tuple[np.ndarray, np.ndarray]:
        return point_segment_distance(np.asarray(point, dtype=float), self.seg_a, self.seg_b)

    def nearest_lane(self, point, heading: Optional[float] = None) -> LaneQuery:
        """Closest lane centerline to ``point``.

        With ``heading`` given, segments whose direction disagrees by more
        than 90 degrees are skipped unless nothing else is close.
        """
        dist, t = self.segment_distances(point)
        if heading is not None:
            d = self.seg_b - self.seg_a
            aligned = d[:, 0] * math.cos(heading) + d[:, 1] * math.sin(heading) > 0
            masked = np.where(aligned, dist, np.inf)
            if np.isfinite(masked).any() and masked.min() <= dist.min() + 2.0:
                dist_sel = masked
            else:
                dist_sel = dist
        else:
            dist_sel = dist
        i = int(np.argmin(dist_sel))
        lane = self.lanes[self.lane_ids[self.seg_lane[i]]]
        seg_len = np.linalg.norm(self.seg_b[i] - self.seg_a[i])
        return LaneQuery(lane, float(self.seg_s0[i] + t[i] * seg_len), float(dist[i]))

    def lanes_containing(self, point) -> list[Lane]:
        """Lanes whose strip (centerline +- width/2) contains ``point``."""
        dist, _ = self.segment_distances(point)
        hit = np.unique(self.seg_lane[dist <= self.seg_width / 2])
        return [self.lanes[self.lane_ids[k]] for k in hit]

    def light_for_lane(self, lane_id: str) -> Optional[TrafficLight]:
        for light in self.traffic_lights:
            if light.lane == lane_id:
                return light
        return None


def _polygon(entry) -> Polygon:
    if isinstance(entry, dict):
        return Polygon(entry["exterior"], entry.get("holes", []))
    return Polygon(entry)


def load_document(path: str | Path) -> dict:
    """Read a JSON or YAML document (YAML is a superset, so one parser serves both)."""
    text = Path(path).read_text()
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise MapError(f"{path}: cannot parse document: {exc}") from exc


def build_map(doc: dict | str | Path) -> MapGraph:
    """Build and validate a :class:`MapGraph` from a map-description document."""
    if isinstance(doc, (str, Path)):
        doc = load_document(doc)
    if not isinstance(doc, dict) or "lanes" not in doc:
        raise MapError("map document must be a mapping with a 'lanes' key")

    junctions = [_polygon(p) for p in doc.get("junctions", [])]
    lanes: dict[str, Lane] = {}
    for i, entry in enumerate(doc["lanes"]):
        try:
            lid = str(entry["id"])
            pts = np.asarray(entry["centerline"], dtype=float)
            width = float(entry["width"])
            limit = float(entry["speed_limit"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MapError(f"lanes[{i}]: missing or invalid field: {exc}") from exc
        if lid in lanes:
            raise MapError(f"lanes[{i}]: duplicate lane id {lid!r}")
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise MapError(f"lane {lid!r}: centerline needs at least 2 points")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 1e-9):
            raise MapError(f"lane {lid!r}: degenerate centerline (repeated point)")
        if np.any(seg > 2.0 + 1e-6):
            raise MapError(f"lane {lid!r}: centerline points more than 2 m apart")
        if width <= 0 or limit <= 0:
            raise MapError(f"lane {lid!r}: width and speed_limit must be positive")
        flag = entry.get("in_intersection")
        if flag is None:
            flag = bool(junctions) and any(
                bool(np.all(contains_xy(j.buffer(1e-9), pts[:, 0], pts[:, 1]))) for j in junctions
            )
        lanes[lid] = Lane(
            id=lid,
            centerline=pts,
            width=width,
            speed_limit=limit,
            successors=[str(s) for s in entry.get("successors", [])],
            left=None if entry.get("left") is None else str(entry["left"]),
            right=None if entry.get("right") is None else str(entry["right"]),
            in_intersection=bool(flag),
            direction_group=str(entry.get("direction_group", lid)),
        )
    if not lanes:
        raise MapError("map has no lanes")
    for lane in lanes.values():
        for ref in [*lane.successors, lane.left, lane.right]:
            if ref is not None and ref not in lanes:
                raise MapError(f"lane {lane.id!r}: dangling reference to {ref!r}")

    lights = []
    for i, entry in enumerate(doc.get("traffic_lights", [])):
        if entry["lane"] not in lanes:
            raise MapError(f"traffic_lights[{i}]: dangling lane reference {entry['lane']!r}")
        schedule = [(str(p["phase"]), float(p["duration"])) for p in entry["schedule"]]
        lights.append(
            TrafficLight(str(entry.get("id", i)), np.asarray(entry["stop_line"], float), entry["lane"], schedule, float(entry.get("offset", 0.0)))
        )
    signs = []
    for i, entry in enumerate(doc.get("stop_signs", [])):
        if entry["lane"] not in lanes:
            raise MapError(f"stop_signs[{i}]: dangling lane reference {entry['lane']!r}")
        signs.append(StopSign(str(entry.get("id", i)), np.asarray(entry["trigger"], float), entry["lane"]))

    graph = MapGraph(
        lanes=lanes,
        drivable_polygons=[_polygon(p) for p in doc.get("drivable", [])],
        sidewalk_polygons=[_polygon(p) for p in doc.get("sidewalks", [])],
        traffic_lights=lights,
        stop_signs=signs,
        junctions=junctions,
        document=doc,
    )
    pts = np.vstack([lane.centerline for lane in lanes.values()])
    covered = contains_xy(graph.drivable.buffer(1e-6), pts[:, 0], pts[:, 1])
    if not np.all(covered):
        bad = pts[~covered][0]
        raise MapError(f"drivable area does not cover lane centerline point {bad.tolist()}")
    return graph


def save_document(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1))


@dataclass
class Route:
    lane_sequence: list[str]
    dense_path: np.ndarray
    total_length: float
    dense_lanes: list[str]
    in_intersection: np.ndarray
    best_progress_s: float = 0.0
    lane_changes: int = 0
    decision_points: int = 0

    def __post_init__(self):
        d = np.diff(self.dense_path, axis=0)
        d = np.vstack([d, d[-1:]])
        self.tangents = d / np.linalg.norm(d, axis=1, keepdims=True)

    def reset_progress(self) -> None:
        self.best_progress_s = 0.0

    def copy(self) -> "Route":
        return Route(
            list(self.lane_sequence),
            self.dense_path.copy(),
            self.total_length,
            list(self.dense_lanes),
            self.in_intersection.copy(),
            self.best_progress_s,
            self.lane_changes,
            self.decision_points,
        )

    def lane_at(self, s: float) -> str:
        return self.dense_lanes[int(np.clip(round(s / ROUTE_SPACING), 0, len(self.dense_lanes) - 1))]

    def to_dict(self) -> dict:
        return {
            "lane_sequence": self.lane_sequence,
            "dense_path": self.dense_path.tolist(),
            "total_length": self.total_length,
            "dense_lanes": self.dense_lanes,
            "in_intersection": self.in_intersection.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Route":
        return cls(
            list(d["lane_sequence"]),
            np.asarray(d["dense_path"], float),
            float(d["total_length"]),
            list(d["dense_lanes"]),
            np.asarray(d["in_intersection"], bool),
        )


def chord_walk(points: np.ndarray, step: float, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Walk a polyline placing each next point exactly ``step`` metres (straight-line)
    from the previous one.

    Returns up to ``count`` points and, for each, the index of the polyline
    segment it lies on.
    """
    out = [points[0]]
    seg = [0]
    p = points[0]
    i = 0
    n = len(points)
    step2 = step * step
    # a vertex sitting exactly one step away stays the segment end, whatever the float noise
    reach2 = step2 * (1.0 - 1e-9)
    while len(out) < count:
        while i + 1 < n and (points[i + 1][0] - p[0]) ** 2 + (points[i + 1][1] - p[1]) ** 2 < reach2:
            i += 1
        if i + 1 >= n:
            break
        a, b = points[i], points[i + 1]
        d = b - a
        f = a - p
        qa, qb, qc = d @ d, 2 * (f @ d), f @ f - step2
        t = (-qb + math.sqrt(max(qb * qb - 4 * qa * qc, 0.0))) / (2 * qa)
        p = a + t * d
        out.append(p)
        seg.append(i)
    return np.asarray(out), np.asarray(seg)


def _densify(raw: np.ndarray, lanes_per_raw: list[str], total: float):
    n = int(round(total / ROUTE_SPACING)) + 1
    dense, seg = chord_walk(raw, ROUTE_SPACING, n)
    if len(dense) < n:
        return None
    # a segment belongs to the lane of its far endpoint
    dense_lanes = [lanes_per_raw[min(i + 1, len(raw) - 1)] if k else lanes_per_raw[0] for k, i in enumerate(seg)]
    return dense, dense_lanes


def _lane_change_target(lane: Lane, lanes: dict[str, Lane]) -> list[Lane]:
    out = []
    for ref in (lane.left, lane.right):
        if ref is not None:
            other = lanes[ref]
            if other.direction_group == lane.direction_group and not other.in_intersection:
                out.append(other)
    return out


def _sample_route(
    graph: MapGraph,
    rng: np.random.Generator,
    target: float,
    lane_change_prob: float,
    decision_interval: float,
):
    starts = [lane for lane in graph.lanes.values() if not lane.in_intersection] or list(graph.lanes.values())
    lane = starts[rng.integers(len(starts))]
    s = float(rng.uniform(0.0, lane.length))
    pieces: list[np.ndarray] = []
    tags: list[tuple[str, int]] = []
    sequence = [lane.id]
    length = 0.0
    changes = decisions = 0
    next_decision = s + decision_interval

    def emit(points: np.ndarray, lane_id: str):
        nonlocal length
        if pieces:
            points = points[1:] if np.allclose(points[0], pieces[-1][-1]) else points
        if len(points) == 0:
            return
        prev = pieces[-1][-1] if pieces else points[0]
        length += float(np.sum(np.linalg.norm(np.diff(np.vstack([prev, points]), axis=0), axis=1)))
        pieces.append(points)
        tags.append((lane_id, len(points)))

    emit(lane.point_at([s]), lane.id)
    need = target + 5.0
    while length < need:
        stop = min(lane.length, next_decision) if not lane.in_intersection else lane.length
        if stop > s:
            emit(lane.slice(s, stop), lane.id)
            s = stop
        if length >= need:
            break
        if s >= lane.length - 1e-9:
            if not lane.successors:
                return None
            lane = graph.lanes[lane.successors[rng.integers(len(lane.successors))]]
            s = 0.0
            sequence.append(lane.id)
            next_decision = decision_interval
            continue
        # decision point outside an intersection
        next_decision = s + decision_interval
        targets = [t for t in _lane_change_target(lane, graph.lanes)]
        if not targets:
            continue
        decisions += 1
        if rng.random() >= lane_change_prob:
            continue
        other = targets[rng.integers(len(targets))]
        s_other, _ = other.project(lane.point_at(s))
        span = LANE_CHANGE_LENGTH
        if s + span > lane.length or s_other + span > other.length:
            continue
        changes += 1
        w = np.linspace(0.0, 1.0, int(span / 0.5) + 1)
        blend = (1 - w)[:, None] * lane.point_at(s + w * span) + w[:, None] * other.point_at(s_other + w * span)
        emit(blend, other.id)
        lane, s = other, s_other + span
        sequence.append(lane.id)
        next_decision = s + decision_interval
    raw = np.vstack(pieces)
    lane_per_raw = [lid for lid, n in tags for _ in range(n)]
    return raw, lane_per_raw, sequence, changes, decisions


def generate_route(
    graph: MapGraph,
    rng: np.random.Generator,
    target_length: float,
    lane_change_prob: float = 0.1,
    *,
    decision_interval: float = DECISION_INTERVAL,
    spawn_check: Optional[Callable[[Route], bool]] = None,
    retries: int = ROUTE_RETRIES,
) -> Route:
    """Sample a route by walking the lane graph in 1 m steps.

    Successors at lane ends are picked uniformly; every ``decision_interval``
    metres outside intersections a lane change to a same-direction neighbour
    happens with probability ``lane_change_prob``. Invalid samples (dead
    ends, blocked spawn) are rejected and redrawn up to ``retries`` times.
    """
    if target_length <= 0:
        raise ValueError("target_length must be positive")
    total = float(math.ceil(target_length))
    for _ in range(retries):
        sample = _sample_route(graph, rng, total, lane_change_prob, decision_interval)
        if sample is None:
            continue
        raw, lane_per_raw, sequence, changes, decisions = sample
        densified = _densify(raw, lane_per_raw, total)
        if densified is None:
            continue
        dense, dense_lanes = densified
        route = Route(
            lane_sequence=sequence,
            dense_path=dense,
            total_length=total,
            dense_lanes=dense_lanes,
            in_intersection=np.array([graph.lanes[l].in_intersection for l in dense_lanes]),
            lane_changes=changes,
            decision_points=decisions,
        )
        if not graph.is_drivable(*dense[0]):
            continue
        if spawn_check is not None and not spawn_check(route):
            continue
        return route
    raise RouteError(f"no valid route of {target_length} m after {retries} attempts (map too small?)")


def route_along_lanes(graph: MapGraph, lane_ids: list[str], start_s: float, length: float) -> Route:
    """Deterministic route following a fixed lane chain (used for scripted fixtures)."""
    pieces, tags = [], []
    s = start_s
    for lid in lane_ids:
        lane = graph.lanes[lid]
        pts = lane.slice(s, lane.length)
        if pieces:
            pts = pts[1:]
        pieces.append(pts)
        tags.extend([lid] * len(pts))
        s = 0.0
    raw = np.vstack(pieces)
    total = float(math.ceil(length))
    densified = _densify(raw, tags, total)
    if densified is None:
        raise RouteError(f"lane chain is only {polyline_lengths(raw)[-1]:.1f} m long, need {total}")
    dense, dense_lanes = densified
    return Route(
        lane_sequence=list(lane_ids),
        dense_path=dense,
        total_length=total,
        dense_lanes=dense_lanes,
        in_intersection=np.array([graph.lanes[l].in_intersection for l in dense_lanes]),
    )


def project_to_route(route: Route, point) -> tuple[float, float]:
    """Nearest-vertex projection onto the dense path.

    Returns ``(s, lateral)`` with ties resolved toward the smaller arc length
    and lateral offset positive to the left of the path.
    """
    p = np.asarray(point, dtype=float)
    d2 = np.sum((route.dense_path - p) ** 2, axis=1)
    i = int(np.argmin(d2))
    t = route.tangents[i]
    rel = p - route.dense_path[i]
    return i * ROUTE_SPACING, float(t[0] * rel[1] - t[1] * rel[0])


def route_completion_delta(route: Route, new_position) -> float:
    """Percent of the route newly completed; advances the progress high-water mark."""
    s, _ = project_to_route(route, new_position)
    gain = max(0.0, s - route.best_progress_s)
    route.best_progress_s = max(route.best_progress_s, s)
    return gain / route.total_length * 100.0
