"""Synthetic map documents: straight roads, loops, intersections and small towns.

Every builder returns a plain map-description document (see ``docs/map_schema.md``)
that :func:`carl.worldmap.build_map` accepts. Documents are deterministic.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from shapely.geometry import LineString, Point, Polygon
from shapely.ops import unary_union

from carl.geometry import interpolate_polyline, polyline_lengths, resample_polyline
from carl.worldmap import build_map

LANE_WIDTH = 3.5
SPACING = 2.0
SMOOTH_JOIN_DEG = 10.0


def _dir(a, b):
    d = np.asarray(b, float) - np.asarray(a, float)
    return d / np.linalg.norm(d)


def _normals(points: np.ndarray) -> np.ndarray:
    d = np.gradient(points, axis=0)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.stack([d[:, 1], -d[:, 0]], axis=1)  # right-hand normal


def _sample(points: np.ndarray, spacing: float = SPACING) -> np.ndarray:
    length = polyline_lengths(points)[-1]
    n = max(1, math.ceil(length / spacing))
    return resample_polyline(points, length / n, total=length)


def _trim(points: np.ndarray, start: float, end: float) -> np.ndarray:
    cum = polyline_lengths(points)
    keep = (cum > start) & (cum < cum[-1] - end)
    a = interpolate_polyline(points, cum, [start])
    b = interpolate_polyline(points, cum, [cum[-1] - end])
    return np.vstack([a, points[keep], b])


def _bezier(p0, p1, p2, p3, n=100):
    t = np.linspace(0, 1, n)[:, None]
    return (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t**2 * p2 + t**3 * p3


def _ring(poly: Polygon) -> dict | list:
    ext = np.round(np.asarray(poly.exterior.coords)[:-1], 3).tolist()
    holes = [np.round(np.asarray(h.coords)[:-1], 3).tolist() for h in poly.interiors]
    return {"exterior": ext, "holes": holes} if holes else ext


def _polys(geom) -> list:
    if geom.is_empty:
        return []
    geoms = getattr(geom, "geoms", [geom])
    return [_ring(g) for g in geoms if isinstance(g, Polygon) and g.area > 1e-6]


def road_network(
    nodes: dict[str, tuple[float, float]],
    edges: list[dict],
    *,
    lane_width: float = LANE_WIDTH,
    speed_limit: float = 13.9,
    junction_radius: float = 12.0,
    lights: str = "none",
    stop_signs: bool = False,
    sidewalk_width: float = 2.0,
) -> dict:
    """Turn a node/edge road description into a map document.

    Each edge is ``{"u", "v", "forward": n, "backward": m, "via": [...]}``.
    Nodes joining three or more roads become junctions with connector lanes
    flagged ``in_intersection``; sharp degree-2 nodes become plain bends.
    ``lights`` is ``"none"``, ``"cycle"`` or ``"red"`` (always red).
    """
    nodes = {k: np.asarray(v, float) for k, v in nodes.items()}
    degree = {k: 0 for k in nodes}
    for e in edges:
        degree[e["u"]] += 1
        degree[e["v"]] += 1

    paths = {}
    for i, e in enumerate(edges):
        pts = np.vstack([nodes[e["u"]], *[np.asarray(p, float) for p in e.get("via", [])], nodes[e["v"]]])
        paths[i] = pts

    def end_dir(i, node, outgoing):
        pts = paths[i]
        e = edges[i]
        if e["u"] == node:
            d = _dir(pts[0], pts[1])
        else:
            d = _dir(pts[-1], pts[-2])
        return d if outgoing else -d

    # junction kind per node: dead end, smooth join, bend, or intersection
    kind = {}
    for k in nodes:
        if degree[k] <= 1:
            kind[k] = "end"
        elif degree[k] == 2:
            inc = [i for i, e in enumerate(edges) if k in (e["u"], e["v"])]
            d0 = end_dir(inc[0], k, outgoing=False)
            d1 = end_dir(inc[1], k, outgoing=True)
            ang = math.degrees(math.acos(np.clip(d0 @ d1, -1, 1)))
            kind[k] = "smooth" if ang < SMOOTH_JOIN_DEG else "bend"
        else:
            kind[k] = "junction"
    radius = {k: (junction_radius if kind[k] in ("junction", "bend") else 0.0) for k in nodes}

    lanes = {}
    arriving: dict[str, list[tuple[str, int, int]]] = {k: [] for k in nodes}  # node -> (lane id, edge, index)
    leaving: dict[str, list[tuple[str, int, int]]] = {k: [] for k in nodes}
    for i, e in enumerate(edges):
        base = _trim(_sample(paths[i], 0.5), radius[e["u"]], radius[e["v"]])
        for direction, count in (("f", e.get("forward", 1)), ("b", e.get("backward", 0))):
            if count == 0:
                continue
            line = base if direction == "f" else base[::-1]
            src, dst = (e["u"], e["v"]) if direction == "f" else (e["v"], e["u"])
            normals = _normals(line)
            group = f"{src}-{dst}"
            for k in range(count):
                pts = _sample(line + normals * (k + 0.5) * lane_width)
                lid = f"{src}-{dst}/{k}"
                lanes[lid] = {
                    "id": lid,
                    "centerline": np.round(pts, 4).tolist(),
                    "width": lane_width,
                    "speed_limit": e.get("speed_limit", speed_limit),
                    "successors": [],
                    "left": f"{src}-{dst}/{k - 1}" if k > 0 else None,
                    "right": f"{src}-{dst}/{k + 1}" if k + 1 < count else None,
                    "direction_group": group,
                    "in_intersection": False,
                }
                arriving[dst].append((lid, i, k))
                leaving[src].append((lid, i, k))
        fw, bw = e.get("forward", 1), e.get("backward", 0)
        if fw and bw:
            lanes[f"{e['u']}-{e['v']}/0"]["left"] = f"{e['v']}-{e['u']}/0"
            lanes[f"{e['v']}-{e['u']}/0"]["left"] = f"{e['u']}-{e['v']}/0"

    junction_polys = []
    lights_doc, signs_doc = [], []
    for node, pos in nodes.items():
        if kind[node] == "smooth":
            for lid, i, k in arriving[node]:
                for oid, j, m in leaving[node]:
                    if j != i and m == k:
                        lanes[lid]["successors"].append(oid)
            continue
        if kind[node] not in ("junction", "bend"):
            continue
        max_off = max((k + 1) * lane_width for _, _, k in arriving[node] + leaving[node])
        disc = Point(pos).buffer(math.hypot(radius[node], max_off) + 0.05, 64)
        if kind[node] == "junction":
            junction_polys.append(disc)
        for lid, i, k in arriving[node]:
            a = np.asarray(lanes[lid]["centerline"])
            d_in = _dir(a[-2], a[-1])
            outs = [(oid, j, m) for oid, j, m in leaving[node] if j != i]
            n_out = {j: sum(1 for _, jj, _ in outs if jj == j) for _, j, _ in outs}
            for oid, j, m in outs:
                if m != min(k, n_out[j] - 1):
                    continue
                b = np.asarray(lanes[oid]["centerline"])
                d_out = _dir(b[0], b[1])
                h = 0.5 * radius[node]
                curve = _bezier(a[-1], a[-1] + d_in * h, b[0] - d_out * h, b[0])
                cid = f"{lid}>{oid}"
                lanes[cid] = {
                    "id": cid,
                    "centerline": np.round(_sample(curve), 4).tolist(),
                    "width": lane_width,
                    "speed_limit": min(lanes[lid]["speed_limit"], lanes[oid]["speed_limit"]),
                    "successors": [oid],
                    "left": None,
                    "right": None,
                    "direction_group": cid,
                    "in_intersection": kind[node] == "junction",
                }
                lanes[lid]["successors"].append(cid)
            if kind[node] == "junction":
                normal = np.array([d_in[1], -d_in[0]])
                if lights != "none":
                    ang = math.atan2(d_in[1], d_in[0])
                    axis_group = int(round(ang / (math.pi / 2))) % 2
                    schedule = (
                        [{"phase": "red", "duration": 1000.0}]
                        if lights == "red"
                        else [{"phase": "green", "duration": 10.0}, {"phase": "yellow", "duration": 2.0}, {"phase": "red", "duration": 12.0}]
                    )
                    lights_doc.append(
                        {
                            "id": f"tl:{lid}",
                            "lane": lid,
                            "stop_line": np.round([a[-1] - normal * lane_width / 2, a[-1] + normal * lane_width / 2], 4).tolist(),
                            "schedule": schedule,
                            "offset": 12.0 * axis_group if lights == "cycle" else 0.0,
                        }
                    )
                if stop_signs:
                    back = a[-1] - d_in * 6.0
                    quad = [
                        a[-1] - normal * lane_width / 2,
                        a[-1] + normal * lane_width / 2,
                        back + normal * lane_width / 2,
                        back - normal * lane_width / 2,
                    ]
                    signs_doc.append({"id": f"ss:{lid}", "lane": lid, "trigger": np.round(quad, 4).tolist()})

    strips = [LineString(l["centerline"]).buffer(l["width"] / 2, cap_style="round") for l in lanes.values()]
    drivable = unary_union(strips + junction_polys)
    outer = unary_union([s.buffer(sidewalk_width) for s in strips])
    sidewalks = outer.difference(drivable.buffer(1e-3)) if sidewalk_width > 0 else Polygon()
    doc = {
        "lanes": list(lanes.values()),
        "drivable": _polys(drivable),
        "sidewalks": _polys(sidewalks),
        "junctions": [_ring(j) for j in junction_polys],
        "traffic_lights": lights_doc,
        "stop_signs": signs_doc,
    }
    return doc


def straight_road(length: float = 500.0, lanes: int = 2, two_way: bool = False, speed_limit: float = 13.9) -> dict:
    return road_network(
        {"A": (0.0, 0.0), "B": (length, 0.0)},
        [{"u": "A", "v": "B", "forward": lanes, "backward": lanes if two_way else 0}],
        speed_limit=speed_limit,
    )


def _arc(center, radius, a0, a1, step=2.0):
    n = max(2, math.ceil(abs(a1 - a0) * radius / step))
    ang = np.linspace(a0, a1, n + 1)[1:-1]
    return [(center[0] + radius * math.cos(a), center[1] + radius * math.sin(a)) for a in ang]


def loop_road(radius: float = 60.0, lanes: int = 1, speed_limit: float = 13.9) -> dict:
    """One-way ring road (counter-clockwise) with ``lanes`` parallel lanes."""
    names = ["N0", "N1", "N2", "N3"]
    nodes = {n: (radius * math.cos(k * math.pi / 2), radius * math.sin(k * math.pi / 2)) for k, n in enumerate(names)}
    edges = []
    for k in range(4):
        u, v = names[k], names[(k + 1) % 4]
        # outer edge traversed counter-clockwise: lanes offset to the right = outward
        edges.append({"u": u, "v": v, "forward": lanes, "via": _arc((0, 0), radius, k * math.pi / 2, (k + 1) * math.pi / 2)})
    return road_network(nodes, edges, speed_limit=speed_limit)


def four_way_intersection(arm: float = 100.0, lights: str = "none", stop_signs: bool = False, speed_limit: float = 13.9) -> dict:
    nodes = {"C": (0.0, 0.0), "E": (arm, 0.0), "N": (0.0, arm), "W": (-arm, 0.0), "S": (0.0, -arm)}
    edges = [{"u": k, "v": "C", "forward": 1, "backward": 1} for k in ("E", "N", "W", "S")]
    return road_network(nodes, edges, lights=lights, stop_signs=stop_signs, speed_limit=speed_limit)


def grid_town(n: int = 3, block: float = 120.0, lanes: int = 1, lights: str = "cycle", speed_limit: float = 13.9) -> dict:
    """An ``n`` x ``n`` grid of two-way roads; inner nodes are signalised junctions."""
    nodes = {f"{i},{j}": (i * block, j * block) for i in range(n) for j in range(n)}
    edges = []
    for i in range(n):
        for j in range(n):
            if i + 1 < n:
                edges.append({"u": f"{i},{j}", "v": f"{i + 1},{j}", "forward": lanes, "backward": lanes})
            if j + 1 < n:
                edges.append({"u": f"{i},{j}", "v": f"{i},{j + 1}", "forward": lanes, "backward": lanes})
    return road_network(nodes, edges, lights=lights, speed_limit=speed_limit)


FIXTURES = {
    "straight": lambda: straight_road(500.0, lanes=2),
    "straight_long": lambda: straight_road(1500.0, lanes=2),
    "straight_two_way": lambda: straight_road(500.0, lanes=1, two_way=True),
    "single_lane_loop": lambda: loop_road(60.0, lanes=1),
    "multilane_loop": lambda: loop_road(80.0, lanes=2),
    "intersection": lambda: four_way_intersection(100.0),
    "intersection_lights": lambda: four_way_intersection(100.0, lights="cycle"),
    "intersection_red": lambda: four_way_intersection(100.0, lights="red"),
    "intersection_stop": lambda: four_way_intersection(100.0, stop_signs=True),
    "town": lambda: grid_town(3, 120.0, lanes=1),
    "town_multilane": lambda: grid_town(3, 150.0, lanes=2, lights="none"),
}


@lru_cache(maxsize=None)
def _cached_doc(name: str) -> dict:
    if name not in FIXTURES:
        raise KeyError(f"unknown map fixture {name!r}; known: {sorted(FIXTURES)}")
    return FIXTURES[name]()


def fixture_document(name: str) -> dict:
    """Document for a named fixture (cached; treat as read-only)."""
    return _cached_doc(name)


@lru_cache(maxsize=None)
def fixture_map(name: str):
    """Built :class:`~carl.worldmap.MapGraph` for a named fixture (cached, shared read-only)."""
    return build_map(fixture_document(name))
