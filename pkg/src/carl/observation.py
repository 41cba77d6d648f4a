"""Bird's-eye-view rasterization, scalar measurements and privileged critic inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import cv2
import numpy as np

from carl.dynamics import ACTION_LIMITS, Action, EgoState
from carl.geometry import box_corners
from carl.reward import BLOCKED_TIME, InfractionKind, PenaltyLedger
from carl.traffic import AgentKind

SPEED_NORM = 22.2
FORECAST_HORIZON = 1.0
SHIFT = 4  # cv2 fixed-point fraction bits
SCALE = 1 << SHIFT

CARLA_CHANNELS = (
    "road",
    "route_mask",
    "lane_markings",
    "vehicles",
    "pedestrians",
    "traffic_lights",
    "speed_signs",
    "static_objects",
    "shoulder",
    "stop_signs",
)
NUPLAN_CHANNELS = CARLA_CHANNELS[:-1]
LIGHT_INTENSITY = {"red": 1.0, "yellow": 0.66, "green": 0.33}


@dataclass(frozen=True)
class BevSpec:
    height: int = 256
    width: int = 256
    pixels_per_meter: float = 2.0
    extent_front: float = 78.0
    extent_back: float = 50.0
    extent_side: float = 64.0
    channels: tuple = CARLA_CHANNELS

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.pixels_per_meter <= 0:
            raise ValueError("raster size and resolution must be positive")
        if (self.extent_front + self.extent_back) * self.pixels_per_meter > self.height + 1e-9:
            raise ValueError("front + back extent does not fit the raster height")
        if 2 * self.extent_side * self.pixels_per_meter > self.width + 1e-9:
            raise ValueError("side extents do not fit the raster width")
        unknown = set(self.channels) - set(CARLA_CHANNELS)
        if unknown:
            raise ValueError(f"unknown channels {sorted(unknown)}")

    @property
    def origin_row(self) -> int:
        """Row index (from the top) of the ego origin."""
        return self.height - int(math.floor(self.extent_back * self.pixels_per_meter))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.channels), self.height, self.width)

    def pixel_center(self, row, col) -> tuple[np.ndarray, np.ndarray]:
        """Ego-frame (forward, left) metres of pixel centres."""
        fwd = (self.origin_row - (np.asarray(row) + 0.5)) / self.pixels_per_meter
        left = (self.width / 2 - (np.asarray(col) + 0.5)) / self.pixels_per_meter
        return fwd, left

    @classmethod
    def for_profile(cls, profile: str, preset: str = "paper") -> "BevSpec":
        channels = CARLA_CHANNELS if profile == "carla" else NUPLAN_CHANNELS
        if preset == "paper":
            return cls(channels=channels)
        if preset == "desk":
            return cls(128, 128, 1.0, channels=channels)
        raise ValueError(f"unknown raster preset {preset!r}")


@dataclass
class Scene:
    """World state needed for rendering one frame."""

    graph: object
    route: object
    agents: Sequence = ()
    t: float = 0.0
    served_stop_signs: frozenset = frozenset()


class _Layer:
    """Polylines or polygons packed into one array for batched transforms and culling."""

    def __init__(self, items: Sequence[np.ndarray], values: Optional[Sequence[float]] = None):
        items = [np.asarray(p, float) for p in items]
        self.n = len(items)
        self.values = np.asarray(values if values is not None else [1.0] * self.n, float)
        if self.n:
            self.points = np.vstack(items)
            self.splits = np.cumsum([len(p) for p in items])[:-1]
            self.lo = np.array([p.min(axis=0) for p in items])
            self.hi = np.array([p.max(axis=0) for p in items])
        else:
            self.points = np.zeros((0, 2))

    def visible_px(self, frame: "_Frame", mask: Optional[np.ndarray] = None) -> list[np.ndarray]:
        if not self.n:
            return []
        vis = frame.visible_boxes(self.lo, self.hi)
        if mask is not None:
            vis &= mask
        if not vis.any():
            return []
        px = np.split(frame.to_px(self.points), self.splits)
        return [px[k] for k in np.flatnonzero(vis)]


@dataclass
class _MapLayers:
    road: _Layer
    shoulder: _Layer
    markings: _Layer
    speed: _Layer
    lights: _Layer
    light_objs: list
    stops: _Layer
    stop_ids: list


def _poly_rings(geoms) -> list[np.ndarray]:
    rings = []
    for g in geoms:
        parts = getattr(g, "geoms", [g])
        for p in parts:
            if p.is_empty:
                continue
            rings.append(np.asarray(p.exterior.coords, float)[:-1])
            rings.extend(np.asarray(r.coords, float)[:-1] for r in p.interiors)
    return rings


def _map_layers(graph) -> _MapLayers:
    cached = getattr(graph, "_bev_layers", None)
    if cached is not None:
        return cached
    markings, speed_lines, speeds = [], [], []
    for lane in graph.lanes.values():
        speed_lines.append(lane.centerline)
        speeds.append(min(1.0, lane.speed_limit / SPEED_NORM))
        if lane.in_intersection:
            continue
        d = np.gradient(lane.centerline, axis=0)
        n = np.stack([-d[:, 1], d[:, 0]], axis=1) / np.linalg.norm(d, axis=1, keepdims=True)
        markings.append(lane.centerline + n * lane.width / 2)
        markings.append(lane.centerline - n * lane.width / 2)
    layers = _MapLayers(
        _Layer(_poly_rings([graph.drivable])),
        _Layer(_poly_rings([graph.sidewalks]) if not graph.sidewalks.is_empty else []),
        _Layer(markings),
        _Layer(speed_lines, speeds),
        _Layer([l.stop_line for l in graph.traffic_lights]),
        list(graph.traffic_lights),
        _Layer([s.trigger for s in graph.stop_signs]),
        [s.id for s in graph.stop_signs],
    )
    graph._bev_layers = layers
    return layers


class _Frame:
    """World to cv2 fixed-point pixel coordinates for one ego pose."""

    def __init__(self, ego: EgoState, spec: BevSpec):
        self.c, self.s = math.cos(ego.yaw), math.sin(ego.yaw)
        self.x, self.y = ego.x, ego.y
        self.spec = spec
        self.ppm = spec.pixels_per_meter
        self.reach = math.hypot(max(spec.extent_front, spec.extent_back), spec.extent_side) + 2.0

    def to_px(self, pts: np.ndarray) -> np.ndarray:
        dx = pts[..., 0] - self.x
        dy = pts[..., 1] - self.y
        # round away float noise so rigidly transformed worlds render identically
        fwd = np.round(dx * self.c + dy * self.s, 6)
        left = np.round(-dx * self.s + dy * self.c, 6)
        px = np.empty(pts.shape, np.int32)
        px[..., 0] = np.round((self.spec.width / 2 - left * self.ppm - 0.5) * SCALE)
        px[..., 1] = np.round((self.spec.origin_row - fwd * self.ppm - 0.5) * SCALE)
        return px

    def visible_boxes(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        r = self.reach
        return (lo[:, 0] <= self.x + r) & (hi[:, 0] >= self.x - r) & (lo[:, 1] <= self.y + r) & (hi[:, 1] >= self.y - r)


def _fill(img, px: list, value: int) -> None:
    if px:
        cv2.fillPoly(img, px, value, lineType=cv2.LINE_8, shift=SHIFT)


def _lines(img, px: list, value: int, thickness: int = 1) -> None:
    if px:
        cv2.polylines(img, px, False, value, thickness=thickness, lineType=cv2.LINE_8, shift=SHIFT)


def speed_intensity(speed: float) -> float:
    return 0.1 + 0.9 * min(1.0, max(0.0, speed) / SPEED_NORM)


def _u8(v: float) -> int:
    return int(round(255 * min(1.0, max(0.0, v))))


def rasterize_u8(scene: Scene, ego: EgoState, spec: BevSpec) -> np.ndarray:
    """Render the scene as uint8 channels (255 = 1.0), ego at the origin row looking up."""
    layers = _map_layers(scene.graph)
    frame = _Frame(ego, spec)
    out = np.zeros(spec.shape, np.uint8)
    idx = {name: k for k, name in enumerate(spec.channels)}
    thick = max(1, int(round(spec.pixels_per_meter)))

    if "road" in idx:
        _fill(out[idx["road"]], layers.road.visible_px(frame), 255)
    if "shoulder" in idx:
        _fill(out[idx["shoulder"]], layers.shoulder.visible_px(frame), 255)
    if "lane_markings" in idx:
        _lines(out[idx["lane_markings"]], layers.markings.visible_px(frame), 255)
    if "speed_signs" in idx:
        for value in np.unique(layers.speed.values):
            _lines(out[idx["speed_signs"]], layers.speed.visible_px(frame, layers.speed.values == value), _u8(value))
    if "route_mask" in idx and scene.route is not None:
        mask = scene.route.in_intersection
        if mask.any():
            # contiguous in-intersection stretches
            edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(int), [0]])))
            pieces = [scene.route.dense_path[a : max(b, a + 2)] for a, b in zip(edges[::2], edges[1::2])]
            width = int(round(3.5 * spec.pixels_per_meter))
            _lines(out[idx["route_mask"]], _Layer(pieces).visible_px(frame), 255, width)
    if "traffic_lights" in idx and layers.lights.n:
        states = np.array([LIGHT_INTENSITY.get(l.state(scene.t), 0.0) for l in layers.light_objs])
        for value in np.unique(states):
            _lines(out[idx["traffic_lights"]], layers.lights.visible_px(frame, states == value), _u8(value), thick)
    if "stop_signs" in idx and layers.stops.n:
        keep = np.array([sid not in scene.served_stop_signs for sid in layers.stop_ids])
        _fill(out[idx["stop_signs"]], layers.stops.visible_px(frame, keep), 255)

    channel_for = {AgentKind.VEHICLE: "vehicles", AgentKind.PEDESTRIAN: "pedestrians", AgentKind.STATIC: "static_objects"}
    for agent in scene.agents:
        name = channel_for[agent.kind]
        if name not in idx:
            continue
        if abs(agent.x - ego.x) > frame.reach or abs(agent.y - ego.y) > frame.reach:
            continue
        img = out[idx[name]]
        if agent.kind == AgentKind.STATIC:
            value = 255
        else:
            value = _u8(speed_intensity(agent.speed))
        corners = box_corners(agent.x, agent.y, agent.yaw, agent.extent[0], agent.extent[1])
        cv2.fillPoly(img, [frame.to_px(corners)], value, lineType=cv2.LINE_8, shift=SHIFT)
        if agent.kind != AgentKind.STATIC and agent.speed > 0:
            d = agent.speed * FORECAST_HORIZON
            end = np.array([agent.x + d * math.cos(agent.yaw), agent.y + d * math.sin(agent.yaw)])
            seg = np.array([[agent.x, agent.y], end])
            cv2.polylines(img, [frame.to_px(seg)], False, value, thickness=1, lineType=cv2.LINE_8, shift=SHIFT)
    return out


def rasterize(scene: Scene, ego: EgoState, spec: BevSpec) -> np.ndarray:
    """Float32 raster with values in [0, 1]."""
    return rasterize_u8(scene, ego, spec).astype(np.float32) / np.float32(255.0)


CARLA_MEASUREMENTS = ("accel_cmd", "steer_cmd", "speed", "v_lon", "v_lat", "speed_limit", "steer")
NUPLAN_MEASUREMENTS = CARLA_MEASUREMENTS + ("accel", "accel_lat", "steer_rate", "yaw_rate", "yaw_accel")


def measurement_size(profile: str) -> int:
    return len(CARLA_MEASUREMENTS if profile == "carla" else NUPLAN_MEASUREMENTS)


def measurements(
    ego: EgoState,
    last_action: Optional[Action],
    speed_limit: float,
    profile: str = "carla",
    prev_yaw_rate: Optional[float] = None,
    dt: float = 0.1,
) -> np.ndarray:
    """Fixed-order normalized measurement vector.

    Speeds are divided by 22.2 m/s. Lateral velocity is that of the vehicle
    centre, half a wheelbase ahead of the rear axle.
    """
    limits = ACTION_LIMITS[profile]
    a = last_action or Action()
    v_lat = ego.yaw_rate * ego.wheelbase / 2.0
    vec = [
        a.accel_brake,
        a.steer_cmd,
        ego.v / SPEED_NORM,
        ego.v / SPEED_NORM,
        v_lat / SPEED_NORM,
        speed_limit / SPEED_NORM,
        ego.steer / limits.steer,
    ]
    if profile == "nuplan":
        yaw_accel = 0.0 if prev_yaw_rate is None else (ego.yaw_rate - prev_yaw_rate) / dt
        vec += [
            ego.accel / max(abs(limits.accel[0]), limits.accel[1]),
            ego.accel_lat / 4.89,
            ego.steer_rate / limits.steer_rate,
            ego.yaw_rate / 0.95,
            yaw_accel / 1.93,
        ]
    out = np.asarray(vec, np.float32)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite measurement")
    return out


CRITIC_EXTRAS = ("time_to_timeout", "time_to_blocked", "remaining_route", "ttc_penalty", "comfort_penalty")


def critic_extras(
    step: int,
    horizon: int,
    stopped_time: float,
    route_progress: float,
    route_length: float,
    ledger: PenaltyLedger,
    blocked_time: float = BLOCKED_TIME,
) -> np.ndarray:
    """Five privileged scalars in [0, 1] for the value head."""
    vals = [
        1.0 - step / horizon,
        1.0 - stopped_time / blocked_time,
        1.0 - route_progress / route_length,
        ledger.remaining_fraction(InfractionKind.TTC),
        ledger.remaining_fraction(InfractionKind.COMFORT),
    ]
    return np.clip(np.asarray(vals, np.float32), 0.0, 1.0)
