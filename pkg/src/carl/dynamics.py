"""Kinematic bicycle ego model, action mapping, comfort checks and TTC forecasting."""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from carl.geometry import box_corners, boxes_overlap

DT = 0.1
STEER_RATE_LIMIT = 1.2
COMFORT_WINDOW = 5


@dataclass(frozen=True)
class ActionLimits:
    accel: tuple[float, float]
    steer: float
    steer_rate: float = STEER_RATE_LIMIT
    # split map: negative commands scale the brake limit, positive the throttle limit
    split: bool = False


ACTION_LIMITS = {
    "nuplan": ActionLimits(accel=(-3.2, 2.4), steer=0.84),
    # Brake/throttle split with a zero command coasting, like a pedal interface.
    "carla": ActionLimits(accel=(-6.0, 3.0), steer=0.7, split=True),
}


@dataclass(frozen=True)
class EgoState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    v: float = 0.0
    accel: float = 0.0
    steer: float = 0.0
    steer_rate: float = 0.0
    yaw_rate: float = 0.0
    wheelbase: float = 2.9
    accel_lat: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Action:
    accel_brake: float = 0.0
    steer_cmd: float = 0.0

    def __post_init__(self):
        if not (-1.0 <= self.accel_brake <= 1.0 and -1.0 <= self.steer_cmd <= 1.0):
            raise ValueError(f"action components must lie in [-1, 1], got {self}")

    @classmethod
    def clipped(cls, a: Sequence[float]) -> "Action":
        return cls(float(np.clip(a[0], -1, 1)), float(np.clip(a[1], -1, 1)))


def map_action(a: Action, limits: ActionLimits) -> tuple[float, float]:
    """Map [-1, 1]^2 to (acceleration m/s^2, target steering angle rad).

    Affine over the acceleration band, or piecewise linear through zero when
    ``limits.split`` is set.
    """
    lo, hi = limits.accel
    if limits.split:
        accel = a.accel_brake * (hi if a.accel_brake >= 0 else -lo)
    else:
        accel = lo + (a.accel_brake + 1.0) / 2.0 * (hi - lo)
    return accel, a.steer_cmd * limits.steer


def steer_rate_for(state: EgoState, steer_target: float, limits: ActionLimits, dt: float = DT) -> float:
    """Discrete-time derivative toward the target angle, clipped to the rate limit."""
    rate = (steer_target - state.steer) / dt
    return float(np.clip(rate, -limits.steer_rate, limits.steer_rate))


def step_bicycle(state: EgoState, accel: float, steer_rate: float, dt: float = DT, steer_max: float = 0.84) -> EgoState:
    """One explicit-Euler step of the kinematic bicycle; speed never goes negative."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = state.x + state.v * math.cos(state.yaw) * dt
    y = state.y + state.v * math.sin(state.yaw) * dt
    yaw = state.yaw + state.v * math.tan(state.steer) / state.wheelbase * dt
    steer = min(max(state.steer + steer_rate * dt, -steer_max), steer_max)
    v = max(0.0, state.v + accel * dt)
    curvature = math.tan(steer) / state.wheelbase
    if not -math.pi <= yaw <= math.pi:
        yaw = math.atan2(math.sin(yaw), math.cos(yaw))
    return EgoState(
        x=x,
        y=y,
        yaw=yaw,
        v=v,
        accel=(v - state.v) / dt,
        steer=steer,
        steer_rate=(steer - state.steer) / dt,
        yaw_rate=v * curvature,
        wheelbase=state.wheelbase,
        accel_lat=v * v * curvature,
    )


class ComfortMetric(enum.Enum):
    LON_ACCEL = "lon_accel"
    LAT_ACCEL = "lat_accel"
    JERK_ABS = "jerk_abs"
    JERK_LON = "jerk_lon"
    YAW_RATE = "yaw_rate"
    YAW_ACCEL = "yaw_accel"


COMFORT_THRESHOLDS = {
    "carla": {
        ComfortMetric.LON_ACCEL: (-20.0, 10.0),
        ComfortMetric.LAT_ACCEL: (-9.0, 9.0),
        ComfortMetric.JERK_ABS: (-30.0, 30.0),
        ComfortMetric.JERK_LON: (-30.0, 30.0),
        ComfortMetric.YAW_RATE: (-1.0, 1.0),
        ComfortMetric.YAW_ACCEL: (-3.0, 3.0),
    },
    "nuplan": {
        ComfortMetric.LON_ACCEL: (-4.05, 2.40),
        ComfortMetric.LAT_ACCEL: (-4.89, 4.89),
        ComfortMetric.JERK_ABS: (-8.37, 8.37),
        ComfortMetric.JERK_LON: (-4.13, 4.13),
        ComfortMetric.YAW_RATE: (-0.95, 0.95),
        ComfortMetric.YAW_ACCEL: (-1.93, 1.93),
    },
}


@dataclass
class ComfortWindow:
    """Recent kinematic samples on the simulator grid plus the threshold bands.

    Samples hold ``(t, accel_lon, accel_lat, jerk_abs, jerk_lon, yaw_rate,
    yaw_accel)``; the two derivative terms are first differences against the
    previous sample.
    """

    thresholds: dict
    maxlen: int = COMFORT_WINDOW
    samples: deque = field(default_factory=deque)

    def __post_init__(self):
        self.samples = deque(self.samples, maxlen=self.maxlen)
        for lo, hi in self.thresholds.values():
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError("comfort thresholds must be finite with lo < hi")

    @classmethod
    def for_profile(cls, profile: str) -> "ComfortWindow":
        return cls(dict(COMFORT_THRESHOLDS[profile]))

    def push(self, t: float, accel_lon: float, accel_lat: float, yaw_rate: float) -> None:
        if self.samples:
            t0, a0, l0, _, _, y0, _ = self.samples[-1]
            if t <= t0:
                raise ValueError("comfort samples must be strictly increasing in time")
            h = t - t0
            jerk_lon = (accel_lon - a0) / h
            jerk_abs = math.hypot(jerk_lon, (accel_lat - l0) / h)
            yaw_accel = (yaw_rate - y0) / h
        else:
            jerk_lon = jerk_abs = yaw_accel = 0.0
        self.samples.append((t, accel_lon, accel_lat, jerk_abs, jerk_lon, yaw_rate, yaw_accel))

    def push_state(self, t: float, state: EgoState) -> None:
        self.push(t, state.accel, state.accel_lat, state.yaw_rate)

    @property
    def ready(self) -> bool:
        return len(self.samples) >= 3

    def clear(self) -> None:
        self.samples.clear()


def comfort_violations(window: ComfortWindow) -> frozenset[ComfortMetric]:
    """Metrics whose latest sample leaves its band; empty until 3 samples exist."""
    if not window.ready:
        return frozenset()
    _, lon, lat, jabs, jlon, yr, ya = window.samples[-1]
    values = {
        ComfortMetric.LON_ACCEL: lon,
        ComfortMetric.LAT_ACCEL: lat,
        ComfortMetric.JERK_ABS: jabs,
        ComfortMetric.JERK_LON: jlon,
        ComfortMetric.YAW_RATE: yr,
        ComfortMetric.YAW_ACCEL: ya,
    }
    out = set()
    for metric, value in values.items():
        lo, hi = window.thresholds[metric]
        if not lo <= value <= hi:
            out.add(metric)
    return frozenset(out)


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    yaw: float
    half_length: float
    half_width: float

    def corners(self) -> np.ndarray:
        return box_corners(self.x, self.y, self.yaw, self.half_length, self.half_width)


EGO_EXTENT = (2.45, 1.05)  # half-length, half-width in metres
TTC_DT = 0.2
TTC_STEPS = 5


def ego_box(ego: EgoState, extent: tuple[float, float] = EGO_EXTENT) -> Box:
    # The box is centred on the state position.
    return Box(ego.x, ego.y, ego.yaw, *extent)


def forecast_ego(ego: EgoState, dt: float = TTC_DT, steps: int = TTC_STEPS) -> list[EgoState]:
    """Constant-speed, constant-steer bicycle roll-out; element 0 is the current state."""
    out = [ego]
    s = ego
    for _ in range(steps):
        s = step_bicycle(s, 0.0, 0.0, dt, steer_max=math.pi / 2)
        out.append(s)
    return out


def agent_forecast_positions(x: float, y: float, yaw: float, speed: float, dt: float = TTC_DT, steps: int = TTC_STEPS) -> np.ndarray:
    t = np.arange(steps + 1) * dt
    return np.stack([x + speed * math.cos(yaw) * t, y + speed * math.sin(yaw) * t], axis=1)


def ttc_violated(
    ego: EgoState,
    agents: Iterable,
    ego_extent: tuple[float, float] = EGO_EXTENT,
    dt_forecast: float = TTC_DT,
    steps: int = TTC_STEPS,
    max_range: float = 60.0,
) -> bool:
    """Whether the ego box meets any agent box within the short forecast horizon.

    ``agents`` are objects with ``x, y, yaw, speed, extent`` (extent as
    half-length, half-width). Agents are held at constant speed and heading.
    """
    if ego_extent[0] <= 0 or ego_extent[1] <= 0:
        raise ValueError("ego extent must be positive")
    agents = [a for a in agents if math.hypot(a.x - ego.x, a.y - ego.y) <= max_range + ego.v * dt_forecast * steps]
    if not agents:
        return False
    ego_path = forecast_ego(ego, dt_forecast, steps)
    ego_xy = np.array([[s.x, s.y] for s in ego_path])
    ego_r = math.hypot(*ego_extent)
    ego_corners = None
    for agent in agents:
        pos = agent_forecast_positions(agent.x, agent.y, agent.yaw, agent.speed, dt_forecast, steps)
        # bounding-circle cull before the exact box test
        near = np.hypot(*(pos - ego_xy).T) <= ego_r + math.hypot(*agent.extent)
        if not near.any():
            continue
        if ego_corners is None:
            ego_corners = [ego_box(s, ego_extent).corners() for s in ego_path]
        for k in np.flatnonzero(near):
            other = box_corners(pos[k, 0], pos[k, 1], agent.yaw, agent.extent[0], agent.extent[1])
            if boxes_overlap(ego_corners[k], other):
                return True
    return False
