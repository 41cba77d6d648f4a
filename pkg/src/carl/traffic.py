"""Background agents: scripted log-replay playback, IDM lane followers and forecasts."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from carl.geometry import interpolate_polyline, polyline_lengths, wrap_angle


class AgentKind(str, enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    STATIC = "static"


VEHICLE_EXTENT = (2.25, 1.0)
PEDESTRIAN_EXTENT = (0.3, 0.3)


@dataclass(frozen=True)
class AgentState:
    id: str
    kind: AgentKind
    x: float
    y: float
    yaw: float
    speed: float
    extent: tuple[float, float]
    lane_id: Optional[str] = None

    def __post_init__(self):
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ValueError(f"agent {self.id}: extents must be positive")
        if self.speed < 0:
            raise ValueError(f"agent {self.id}: negative speed")
        if self.kind == AgentKind.STATIC and self.speed != 0:
            raise ValueError(f"agent {self.id}: static agents cannot move")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "x": self.x,
            "y": self.y,
            "yaw": self.yaw,
            "speed": self.speed,
            "extent": list(self.extent),
            "lane_id": self.lane_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentState":
        return cls(d["id"], AgentKind(d["kind"]), d["x"], d["y"], d["yaw"], d["speed"], tuple(d["extent"]), d.get("lane_id"))


class TrafficMode(str, enum.Enum):
    REPLAY = "replay"
    REACTIVE = "reactive"


@dataclass(frozen=True)
class IDMParams:
    v0: float = 13.9
    s0: float = 2.0
    T: float = 1.5
    a_max: float = 1.5
    b: float = 2.0
    b_max: float = 8.0
    delta: float = 4.0


def idm_accel(v: float, v_lead: float, gap: float, params: IDMParams = IDMParams()) -> float:
    """Intelligent driver model acceleration, clamped to ``[-b_max, a_max]``.

    A non-positive gap means the vehicles already overlap and yields the hard
    braking limit.
    """
    if gap <= 0:
        return -params.b_max
    dv = v - v_lead
    s_star = params.s0 + max(0.0, v * params.T + v * dv / (2.0 * math.sqrt(params.a_max * params.b)))
    a = params.a_max * (1.0 - (v / params.v0) ** params.delta - (s_star / gap) ** 2)
    return min(max(a, -params.b_max), params.a_max)


@dataclass
class AgentScript:
    """Keyframes ``(t, x, y, yaw, speed)`` for one scripted agent."""

    id: str
    kind: AgentKind
    extent: tuple[float, float]
    keyframes: np.ndarray
    lane_id: Optional[str] = None
    reactive: bool = False

    def __post_init__(self):
        self.keyframes = np.asarray(self.keyframes, dtype=float).reshape(-1, 5)
        if len(self.keyframes) == 0:
            raise ValueError(f"script {self.id}: no keyframes")
        if np.any(np.diff(self.keyframes[:, 0]) <= 0):
            raise ValueError(f"script {self.id}: keyframe times must increase")
        # unwrap yaw so interpolation takes the short way round
        self.keyframes[:, 3] = np.unwrap(self.keyframes[:, 3])

    def state_at(self, t: float) -> AgentState:
        k = self.keyframes
        if len(k) == 1 or t <= k[0, 0]:
            row = k[0]
        elif t >= k[-1, 0]:
            row = k[-1]
        else:
            i = int(np.searchsorted(k[:, 0], t, side="right") - 1)
            w = (t - k[i, 0]) / (k[i + 1, 0] - k[i, 0])
            row = (1 - w) * k[i] + w * k[i + 1]
        speed = 0.0 if self.kind == AgentKind.STATIC else max(0.0, float(row[4]))
        return AgentState(self.id, self.kind, float(row[1]), float(row[2]), float(wrap_angle(row[3])), speed, self.extent, self.lane_id)


Script = list[AgentScript]


def replay_step(script: Sequence[AgentScript], t: float) -> list[AgentState]:
    """Interpolated poses of all scripted agents at time ``t``.

    Before the first keyframe an agent holds its first pose; past the last one
    it holds the last pose.
    """
    return [a.state_at(t) for a in script]


def script_to_doc(script: Sequence[AgentScript]) -> dict:
    return {
        "agents": [
            {
                "id": a.id,
                "kind": a.kind.value,
                "extent": list(a.extent),
                "lane_id": a.lane_id,
                "reactive": a.reactive,
                "keyframes": np.round(a.keyframes, 6).tolist(),
            }
            for a in script
        ]
    }


def script_from_doc(doc: dict) -> Script:
    return [
        AgentScript(
            str(a["id"]),
            AgentKind(a["kind"]),
            tuple(a["extent"]),
            np.asarray(a["keyframes"], float),
            a.get("lane_id"),
            bool(a.get("reactive", False)),
        )
        for a in doc.get("agents", [])
    ]


def load_script(path: str | Path) -> Script:
    return script_from_doc(yaml.safe_load(Path(path).read_text()))


def save_script(script: Sequence[AgentScript], path: str | Path) -> None:
    Path(path).write_text(json.dumps(script_to_doc(script), indent=1))


def constant_velocity_forecast(agent: AgentState, horizon: float) -> np.ndarray:
    """Start and end point of a straight constant-velocity forecast."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    d = agent.speed * horizon
    return np.array([[agent.x, agent.y], [agent.x + d * math.cos(agent.yaw), agent.y + d * math.sin(agent.yaw)]])


@dataclass
class LaneFollower:
    """A vehicle driven by IDM along a fixed lane-chain path."""

    id: str
    path: np.ndarray
    s: float
    v: float
    extent: tuple[float, float]
    v0: float
    lane_ids: list[str] = field(default_factory=list)
    lane_starts: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        self.cum = polyline_lengths(self.path)

    def pose(self) -> tuple[float, float, float]:
        s = min(self.s, self.cum[-1])
        p = interpolate_polyline(self.path, self.cum, [s, min(s + 0.5, self.cum[-1])])
        d = p[1] - p[0]
        if np.hypot(*d) < 1e-9:
            d = self.path[-1] - self.path[-2]
        return float(p[0, 0]), float(p[0, 1]), math.atan2(d[1], d[0])

    def lane_at(self) -> Optional[str]:
        if not self.lane_ids:
            return None
        return self.lane_ids[int(np.searchsorted(self.lane_starts, self.s, side="right") - 1)]

    def state(self) -> AgentState:
        x, y, yaw = self.pose()
        return AgentState(self.id, AgentKind.VEHICLE, x, y, yaw, self.v, self.extent, self.lane_at())


def lane_chain(graph, lane_id: str, min_length: float = 300.0) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Follow first successors from ``lane_id`` until ``min_length`` metres are covered."""
    pts, ids, starts = [], [], []
    total = 0.0
    lane = graph.lanes[lane_id]
    while True:
        starts.append(total)
        ids.append(lane.id)
        seg = lane.centerline if not pts else lane.centerline[1:]
        pts.append(seg)
        total += lane.length
        if total >= min_length or not lane.successors:
            break
        lane = graph.lanes[lane.successors[0]]
    return np.vstack(pts), ids, np.asarray(starts)


class TrafficManager:
    """Owns the background traffic of one environment.

    In replay mode every scripted agent plays back its keyframes. In reactive
    mode agents marked ``reactive`` (and carrying a lane) become IDM lane
    followers that brake for anything on their path, including the ego.
    """

    def __init__(self, graph, script: Sequence[AgentScript], mode: TrafficMode, idm: IDMParams = IDMParams()):
        self.graph = graph
        self.script = list(script)
        self.mode = TrafficMode(mode)
        self.idm = idm
        self.followers: list[LaneFollower] = []
        self.replayed: list[AgentScript] = []
        for a in self.script:
            if self.mode == TrafficMode.REACTIVE and a.reactive and a.lane_id and a.kind == AgentKind.VEHICLE:
                path, ids, starts = lane_chain(graph, a.lane_id)
                first = a.state_at(0.0)
                cum = polyline_lengths(path)
                d = np.hypot(path[:, 0] - first.x, path[:, 1] - first.y)
                s0 = float(cum[int(np.argmin(d))])
                v0 = graph.lanes[a.lane_id].speed_limit
                self.followers.append(LaneFollower(a.id, path, s0, first.speed, a.extent, v0, ids, starts))
            else:
                self.replayed.append(a)

    def agents_at(self, t: float) -> list[AgentState]:
        return [f.state() for f in self.followers] + replay_step(self.replayed, t)

    def _leader_gap(self, f: LaneFollower, obstacles: list[tuple[float, float, float, float, float]]) -> tuple[float, float]:
        """Smallest bumper gap and leader speed among obstacles on ``f``'s path ahead."""
        best_gap, best_v = math.inf, 0.0
        if not obstacles:
            return best_gap, best_v
        lo = np.searchsorted(f.cum, f.s)
        hi = np.searchsorted(f.cum, f.s + 80.0)
        seg = f.path[max(lo - 1, 0) : hi + 1]
        seg_s = f.cum[max(lo - 1, 0) : hi + 1]
        if len(seg) < 2:
            return best_gap, best_v
        width = 1.75
        for ox, oy, ov, ohl, ohw in obstacles:
            d = np.hypot(seg[:, 0] - ox, seg[:, 1] - oy)
            i = int(np.argmin(d))
            if d[i] > width + ohw:
                continue
            gap = seg_s[i] - f.s - f.extent[0] - ohl
            if seg_s[i] <= f.s:
                continue
            if gap < best_gap:
                best_gap, best_v = gap, ov
        return best_gap, best_v

    def step(self, t: float, dt: float, ego=None, ego_extent=(2.45, 1.05), red_stop_points: Sequence[np.ndarray] = ()) -> list[AgentState]:
        """Advance reactive agents by ``dt`` and return every agent at time ``t + dt``."""
        others = replay_step(self.replayed, t)
        base = [(a.x, a.y, a.speed, a.extent[0], a.extent[1]) for a in others]
        if ego is not None:
            base.append((ego.x, ego.y, ego.v, ego_extent[0], ego_extent[1]))
        for p in red_stop_points:
            base.append((float(p[0]), float(p[1]), 0.0, 0.01, 0.5))
        states = [(f.pose(), f.v, f.extent) for f in self.followers]
        for k, f in enumerate(self.followers):
            obstacles = list(base)
            for j, ((x, y, _), v, ext) in enumerate(states):
                if j != k:
                    obstacles.append((x, y, v, ext[0], ext[1]))
            gap, v_lead = self._leader_gap(f, obstacles)
            params = IDMParams(f.v0, self.idm.s0, self.idm.T, self.idm.a_max, self.idm.b, self.idm.b_max, self.idm.delta)
            a = idm_accel(f.v, v_lead, gap, params)
            # ballistic update; stop exactly rather than reversing
            if f.v + a * dt < 0:
                f.s += f.v * f.v / (2 * -a) if a < 0 else 0.0
                f.v = 0.0
            else:
                f.s += f.v * dt + 0.5 * a * dt * dt
                f.v += a * dt
        return self.agents_at(t + dt)


# --- scenario library -------------------------------------------------------


def _along_route(route, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pose at arc length ``s``; past the end the path continues along the final tangent."""
    s = np.asarray(s, float)
    idx = np.clip(s, 0, route.total_length)
    cum = np.arange(len(route.dense_path), dtype=float)
    pos = interpolate_polyline(route.dense_path, cum, idx)
    beyond = np.maximum(s - route.total_length, 0.0)
    pos = pos + beyond[..., None] * route.tangents[-1]
    i = np.clip(np.floor(idx).astype(int), 0, len(route.dense_path) - 1)
    yaw = np.arctan2(route.tangents[i, 1], route.tangents[i, 0])
    return pos, yaw


def _lead_profile(t: np.ndarray, s0, v, t_brake, decel, hold, accel) -> tuple[np.ndarray, np.ndarray]:
    """Arc length and speed for cruise, brake to a stop, hold, then pull away to cruise again."""
    t_stop = t_brake + v / decel
    t_go = t_stop + hold
    t_cruise = t_go + v / accel
    s_brake = s0 + v * t_brake
    s_stop = s_brake + v * v / (2 * decel)
    s_back = s_stop + v * v / (2 * accel)
    tb = np.clip(t - t_brake, 0.0, v / decel)
    ta = np.clip(t - t_go, 0.0, v / accel)
    s = np.select(
        [t < t_brake, t < t_stop, t < t_go, t < t_cruise],
        [s0 + v * t, s_brake + v * tb - 0.5 * decel * tb**2, np.full_like(t, s_stop), s_stop + 0.5 * accel * ta**2],
        s_back + v * (t - t_cruise),
    )
    speed = np.select([t < t_brake, t < t_stop, t < t_go, t < t_cruise], [np.full_like(t, v), v - decel * tb, np.zeros_like(t), accel * ta], v)
    return s, speed


def lead_vehicle_brake(route, rng: np.random.Generator, start_s: Optional[float] = None, horizon: float = 120.0) -> AgentScript:
    """A vehicle ahead on the route that cruises, brakes hard to a stop, waits, then drives on."""
    if start_s is None:
        # 25-45 m ahead, pulled in on short routes
        lo = min(25.0, 0.3 * route.total_length)
        s0 = float(rng.uniform(lo, min(45.0, max(lo, route.total_length - 10.0))))
    else:
        s0 = start_s
    v = float(rng.uniform(5.0, 9.0))
    t_brake = float(rng.uniform(3.0, 8.0))
    decel = float(rng.uniform(3.0, 5.0))
    hold = float(rng.uniform(2.0, 5.0))
    t = np.arange(0.0, horizon + 1e-9, 0.5)
    s, speed = _lead_profile(t, s0, v, t_brake, decel, hold, accel=2.0)
    pos, yaw = _along_route(route, s)
    frames = np.column_stack([t, pos, yaw, speed])
    return AgentScript("lead", AgentKind.VEHICLE, VEHICLE_EXTENT, frames, route.lane_at(s0), reactive=False)


def crossing_pedestrian(route, rng: np.random.Generator, horizon: float = 120.0) -> AgentScript:
    """A pedestrian crossing the route roughly when a 8 m/s ego would arrive."""
    lo = min(40.0, 0.4 * route.total_length)
    s_cross = float(rng.uniform(lo, max(lo, min(90.0, route.total_length - 5.0))))
    speed = float(rng.uniform(1.2, 1.8))
    side = 1.0 if rng.random() < 0.5 else -1.0
    lateral0 = 6.0 * side
    arrival = s_cross / 8.0
    t_start = max(0.0, arrival - abs(lateral0) / speed + float(rng.uniform(-1.0, 1.0)))
    (p,), (yaw_r,) = _along_route(route, np.array([s_cross]))
    n = np.array([-math.sin(yaw_r), math.cos(yaw_r)])
    walk = -side * n
    start = p + n * lateral0
    t = np.arange(0.0, horizon + 1e-9, 0.5)
    moved = np.clip(t - t_start, 0.0, 2 * abs(lateral0) / speed) * speed
    pos = start + moved[:, None] * walk
    moving = (t >= t_start) & (moved < 2 * abs(lateral0))
    yaw = math.atan2(walk[1], walk[0])
    frames = np.column_stack([t, pos, np.full_like(t, yaw), np.where(moving, speed, 0.0)])
    return AgentScript("ped", AgentKind.PEDESTRIAN, PEDESTRIAN_EXTENT, frames)


def red_light_runner(route, graph, rng: np.random.Generator, horizon: float = 120.0) -> Optional[AgentScript]:
    """A vehicle on a crossing connector that enters the route's first junction as the ego arrives."""
    idx = np.flatnonzero(route.in_intersection)
    if len(idx) == 0:
        return None
    s_enter = float(idx[0])
    route_lane = route.dense_lanes[idx[0]]
    mid = route.dense_path[idx[min(len(idx) - 1, len(idx) // 2)]]
    best = None
    for lane in graph.lanes.values():
        if not lane.in_intersection or lane.id == route_lane:
            continue
        d = np.hypot(lane.centerline[:, 0] - mid[0], lane.centerline[:, 1] - mid[1])
        heading = lane.heading_at(lane.length / 2)
        ry = math.atan2(route.tangents[idx[0], 1], route.tangents[idx[0], 0])
        crossing = abs(math.sin(heading - ry)) > 0.7
        if crossing and (best is None or d.min() < best[0]):
            best = (float(d.min()), lane, int(np.argmin(d)))
    if best is None:
        return None
    _, lane, k = best
    speed = float(rng.uniform(7.0, 10.0))
    arrival = s_enter / 8.0 + float(rng.uniform(-0.5, 1.5))
    # start upstream of the connector on its predecessor so it passes the stop line
    conflict_s = float(lane.cum[k])
    run_up = speed * arrival
    preds = [l for l in graph.lanes.values() if lane.id in l.successors]
    path = lane.centerline
    s_on = conflict_s + (preds[0].length if preds else 0.0)
    if preds:
        path = np.vstack([preds[0].centerline, lane.centerline[1:]])
    succ = graph.lanes[lane.successors[0]] if lane.successors else None
    if succ is not None:
        path = np.vstack([path, succ.centerline[1:]])
    cum = polyline_lengths(path)
    t = np.arange(0.0, horizon + 1e-9, 0.5)
    s = np.clip(s_on - run_up + speed * t, 0.0, cum[-1])
    pos = interpolate_polyline(path, cum, s)
    nxt = interpolate_polyline(path, cum, np.minimum(s + 0.5, cum[-1]))
    d = nxt - pos
    d[np.hypot(d[:, 0], d[:, 1]) < 1e-9] = path[-1] - path[-2]
    yaw = np.arctan2(d[:, 1], d[:, 0])
    speed_arr = np.where(s < cum[-1], speed, 0.0)
    frames = np.column_stack([t, pos, yaw, speed_arr])
    return AgentScript("runner", AgentKind.VEHICLE, VEHICLE_EXTENT, frames, lane.id)


SCENARIOS = ("lead_vehicle_brake", "crossing_pedestrian", "red_light_runner")


def build_scenario(name: str, route, graph, rng: np.random.Generator) -> Script:
    if name == "lead_vehicle_brake":
        return [lead_vehicle_brake(route, rng)]
    if name == "crossing_pedestrian":
        return [crossing_pedestrian(route, rng)]
    if name == "red_light_runner":
        a = red_light_runner(route, graph, rng)
        return [a] if a is not None else []
    if name in ("", "none"):
        return []
    raise ValueError(f"unknown scenario {name!r}; known: {SCENARIOS}")
