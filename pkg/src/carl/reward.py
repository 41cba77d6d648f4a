"""Route-completion reward with terminal and soft penalties, survival bonus and a shaped baseline."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from carl.dynamics import EGO_EXTENT, EgoState, ComfortMetric, ego_box
from carl.geometry import box_corners, boxes_overlap, points_in_convex

PERSISTENCE_STEPS = 500
DEVIATION_LIMIT = 30.0
BLOCKED_SPEED = 0.1
BLOCKED_TIME = 90.0
NUPLAN_COLLISION_SPEED = 0.05
NUPLAN_CENTER_DEADBAND = 0.5
SPEEDING_RANGE_KMH = 8.0
N_COMFORT = len(ComfortMetric)


class InfractionKind(str, enum.Enum):
    COLLISION = "collision"
    OFF_ROAD = "off_road"
    RUN_RED_LIGHT = "run_red_light"
    RUN_STOP_SIGN = "run_stop_sign"
    ROUTE_DEVIATION = "route_deviation"
    BLOCKED = "blocked"
    OUTSIDE_LANES = "outside_lanes"
    LANE_CENTER = "lane_center"
    SPEEDING = "speeding"
    TTC = "ttc"
    COMFORT = "comfort"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_ORDER


# highest priority first
TERMINAL_ORDER = (
    InfractionKind.COLLISION,
    InfractionKind.OFF_ROAD,
    InfractionKind.RUN_RED_LIGHT,
    InfractionKind.RUN_STOP_SIGN,
    InfractionKind.ROUTE_DEVIATION,
    InfractionKind.BLOCKED,
)
SOFT_KINDS = (
    InfractionKind.OUTSIDE_LANES,
    InfractionKind.LANE_CENTER,
    InfractionKind.SPEEDING,
    InfractionKind.TTC,
    InfractionKind.COMFORT,
)
TERMINAL_VALUE = {InfractionKind.COLLISION: 1.0, InfractionKind.RUN_RED_LIGHT: 1.0}

PROFILES = ("carla", "nuplan")


@dataclass
class LedgerEntry:
    multiplier: float
    remaining: Optional[int]  # None: active until the episode ends


@dataclass
class PenaltyLedger:
    """Persistent soft penalties (TTC and comfort) for one environment.

    Each call to :func:`soft_penalty_product` first ages the ledger by one
    step, then writes new triggers. A trigger covers the step it fires on
    plus ``persistence`` later steps; ``remaining`` counts those later steps.
    Re-triggering an active kind resets its counter and replaces its
    multiplier.
    """

    profile: str = "carla"
    persistence: Optional[int] = PERSISTENCE_STEPS
    entries: dict = field(default_factory=dict)

    @classmethod
    def for_profile(cls, profile: str) -> "PenaltyLedger":
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        return cls(profile, PERSISTENCE_STEPS if profile == "carla" else None)

    def age(self) -> None:
        for kind in list(self.entries):
            e = self.entries[kind]
            if e.remaining is None:
                continue
            e.remaining -= 1
            if e.remaining < 0:
                del self.entries[kind]

    def trigger(self, kind: InfractionKind, multiplier: float) -> None:
        if not 0.0 <= multiplier <= 1.0:
            raise ValueError("multiplier must lie in [0, 1]")
        self.entries[kind] = LedgerEntry(multiplier, self.persistence)

    def product(self) -> float:
        p = 1.0
        for e in self.entries.values():
            p *= e.multiplier
        return p

    def remaining_fraction(self, kind: InfractionKind) -> float:
        e = self.entries.get(kind)
        if e is None:
            return 0.0
        if e.remaining is None:
            return 1.0
        return e.remaining / self.persistence

    def clear(self) -> None:
        self.entries.clear()


@dataclass(frozen=True)
class RewardOutput:
    r_t: float
    terminated: bool
    terminal_kind: Optional[InfractionKind]
    T: float
    rc_t: float
    penalty_product: float

    def __post_init__(self):
        if not self.terminated and self.T != 0:
            raise ValueError("non-terminal steps carry no terminal value")


@dataclass(frozen=True)
class SurvivalConfig:
    s: float = 0.6
    N: int = 150

    def __post_init__(self):
        if not 0.0 <= self.s <= 1.0:
            raise ValueError("survival ratio must lie in [0, 1]")
        if self.N < 1:
            raise ValueError("N must be at least 1")


@dataclass
class Snapshot:
    """Everything the reward needs about one post-step world state."""

    ego: EgoState
    agents: Sequence = ()
    ego_extent: tuple = EGO_EXTENT
    profile: str = "carla"
    route_lateral: float = 0.0
    off_road: bool = False
    outside_lanes: bool = False
    lane_center_distance: Optional[float] = None  # None inside intersections
    lane_half_width: float = 1.75
    speed_limit: float = 13.9
    ran_red_light: bool = False
    ran_stop_sign: bool = False
    stopped_time: float = 0.0
    ttc: bool = False
    comfort: frozenset = frozenset()
    # shaped-reward inputs
    travel: float = 0.0
    steer_delta: float = 0.0
    lead_distance: Optional[float] = None
    red_light_distance: Optional[float] = None
    stop_sign_distance: Optional[float] = None
    route_completed: bool = False


def collides(snap: Snapshot) -> bool:
    ego = ego_box(snap.ego, snap.ego_extent).corners()
    reach = math.hypot(*snap.ego_extent)
    for a in snap.agents:
        if math.hypot(a.x - snap.ego.x, a.y - snap.ego.y) > reach + math.hypot(*a.extent):
            continue
        if boxes_overlap(ego, box_corners(a.x, a.y, a.yaw, a.extent[0], a.extent[1])):
            return True
    return False


def terminal_check(snap: Snapshot) -> Optional[tuple[InfractionKind, float]]:
    """First violated terminal condition in priority order, with its terminal value."""
    nuplan = snap.profile == "nuplan"
    checks = {
        InfractionKind.COLLISION: lambda: (not nuplan or snap.ego.v >= NUPLAN_COLLISION_SPEED) and collides(snap),
        InfractionKind.OFF_ROAD: lambda: snap.off_road,
        InfractionKind.RUN_RED_LIGHT: lambda: not nuplan and snap.ran_red_light,
        InfractionKind.RUN_STOP_SIGN: lambda: not nuplan and snap.ran_stop_sign,
        InfractionKind.ROUTE_DEVIATION: lambda: not nuplan and abs(snap.route_lateral) > DEVIATION_LIMIT,
        InfractionKind.BLOCKED: lambda: not nuplan and snap.stopped_time > BLOCKED_TIME,
    }
    for kind in TERMINAL_ORDER:
        if checks[kind]():
            return kind, TERMINAL_VALUE.get(kind, 0.0)
    return None


def lane_center_factor(distance: float, half_width: float, profile: str = "carla") -> float:
    """1 on the centerline falling linearly to 0 at the lane marking."""
    if profile == "nuplan":
        distance = max(0.0, distance - NUPLAN_CENTER_DEADBAND)
        half_width = half_width - NUPLAN_CENTER_DEADBAND
    if half_width <= 0:
        return 1.0 if distance <= 0 else 0.0
    return min(1.0, max(0.0, 1.0 - distance / half_width))


def speeding_factor(speed: float, limit: float) -> float:
    excess_kmh = (speed - limit) * 3.6
    return min(1.0, max(0.0, 1.0 - excess_kmh / SPEEDING_RANGE_KMH))


def comfort_factor(n_violated: int) -> float:
    return 1.0 - 0.5 * n_violated / N_COMFORT


def soft_penalty_product(snap: Snapshot, ledger: PenaltyLedger) -> float:
    """Product of this step's soft-penalty factors and the persistent ledger entries."""
    ledger.age()
    if snap.ttc:
        ledger.trigger(InfractionKind.TTC, 0.5)
    if snap.comfort:
        ledger.trigger(InfractionKind.COMFORT, comfort_factor(len(snap.comfort)))
    p = 0.0 if snap.outside_lanes else 1.0
    if snap.lane_center_distance is not None:
        p *= lane_center_factor(snap.lane_center_distance, snap.lane_half_width, snap.profile)
    p *= speeding_factor(snap.ego.v, snap.speed_limit)
    return p * ledger.product()


def carl_reward(rc_t: float, penalty_product: float, terminal: Optional[tuple[InfractionKind, float]] = None) -> RewardOutput:
    if rc_t < 0:
        raise ValueError("route completion increment must be non-negative")
    if not 0.0 <= penalty_product <= 1.0:
        raise ValueError("penalty product must lie in [0, 1]")
    kind, T = terminal if terminal is not None else (None, 0.0)
    return RewardOutput(rc_t * penalty_product - T, terminal is not None, kind, T, rc_t, penalty_product)


def survival_adjusted(r_t: float, cfg: SurvivalConfig, terminal: bool = False) -> float:
    """Blend in the constant per-step bonus; terminal steps get none."""
    if terminal:
        return (1.0 - cfg.s) * r_t
    return (1.0 - cfg.s) * r_t + cfg.s * 100.0 / cfg.N


SAFE_MARGIN = {"vehicle": 8.0, "light": 4.0, "stop": 2.5}
TARGET_RAMP = 12.5
SPEED_SCALE = 7.5
DEVIATION_SCALE = 8.0


def target_speed(speed_limit: float, lead: Optional[float] = None, light: Optional[float] = None, stop: Optional[float] = None) -> float:
    v = 0.8 * speed_limit
    for d, margin in ((lead, SAFE_MARGIN["vehicle"]), (light, SAFE_MARGIN["light"]), (stop, SAFE_MARGIN["stop"])):
        if d is not None:
            v = min(v, 0.8 * speed_limit * min(max(d - margin, 0.0), TARGET_RAMP) / TARGET_RAMP)
    return v


def shaped_reward(snap: Snapshot, terminal: Optional[InfractionKind] = None) -> float:
    """Dense baseline reward: speed tracking, travel, deviation and steering smoothness."""
    v_target = target_speed(snap.speed_limit, snap.lead_distance, snap.red_light_distance, snap.stop_sign_distance)
    r_speed = 1.0 - abs(snap.ego.v - v_target) / SPEED_SCALE
    p_dev = -abs(snap.route_lateral) / DEVIATION_SCALE
    c_steer = -abs(snap.steer_delta)
    r = r_speed + snap.travel + 2.0 * p_dev + 0.5 * c_steer
    if terminal == InfractionKind.ROUTE_DEVIATION:
        r += -1.0
    elif terminal in (InfractionKind.COLLISION, InfractionKind.RUN_RED_LIGHT, InfractionKind.RUN_STOP_SIGN):
        r += -1.0 - snap.ego.v
    elif terminal is None and snap.route_completed:
        r += 1.0
    return r


# --- traffic-rule monitors -------------------------------------------------


def _lane_dir(lane, s: float) -> np.ndarray:
    h = lane.heading_at(s)
    return np.array([math.cos(h), math.sin(h)])


class RedLightMonitor:
    """Flags the ego centre crossing a red stop line in the lane's direction of travel."""

    def __init__(self, graph):
        self.lights = []
        for light in graph.traffic_lights:
            lane = graph.lanes[light.lane]
            a, b = np.asarray(light.stop_line, float)
            self.lights.append((light, 0.5 * (a + b), _lane_dir(lane, lane.length), 0.5 * np.linalg.norm(b - a)))

    def crossed(self, prev: np.ndarray, new: np.ndarray, t: float) -> bool:
        for light, mid, fwd, half in self.lights:
            f0 = float(np.dot(prev - mid, fwd))
            f1 = float(np.dot(new - mid, fwd))
            if not (f0 < 0.0 <= f1):
                continue
            w = f0 / (f0 - f1) if f1 != f0 else 0.0
            cross = prev + w * (new - prev)
            side = np.array([-fwd[1], fwd[0]])
            if abs(float(np.dot(cross - mid, side))) <= half and light.state(t) == "red":
                return True
        return False

    def distance_to_red(self, pos: np.ndarray, yaw: float, t: float, lookahead: float = 50.0, lateral: float = 2.5) -> Optional[float]:
        """Longitudinal distance to the nearest red stop line ahead in the ego's lane corridor."""
        best = None
        heading = np.array([math.cos(yaw), math.sin(yaw)])
        for light, mid, fwd, half in self.lights:
            if float(np.dot(heading, fwd)) < 0.5:
                continue
            rel = mid - pos
            d = float(np.dot(rel, fwd))
            if 0.0 <= d <= lookahead and abs(float(np.dot(rel, [-fwd[1], fwd[0]]))) <= max(half, lateral):
                if light.state(t) == "red" and (best is None or d < best):
                    best = d
        return best


class StopSignTracker:
    """Flags leaving a stop-sign trigger area without having come to a stop inside it."""

    def __init__(self, graph, stop_speed: float = BLOCKED_SPEED):
        self.signs = []
        for sign in graph.stop_signs:
            lane = graph.lanes[sign.lane]
            self.signs.append((sign, np.asarray(sign.trigger, float), _lane_dir(lane, lane.length)))
        self.stop_speed = stop_speed
        self.inside: dict[str, float] = {}

    def reset(self) -> None:
        self.inside.clear()

    def update(self, pos: np.ndarray, yaw: float, speed: float) -> bool:
        ran = False
        heading = np.array([math.cos(yaw), math.sin(yaw)])
        for sign, quad, fwd in self.signs:
            inside = bool(points_in_convex(pos[None, :], quad)[0]) and float(np.dot(heading, fwd)) > 0.0
            if inside:
                self.inside[sign.id] = min(self.inside.get(sign.id, math.inf), speed)
            elif sign.id in self.inside:
                if self.inside.pop(sign.id) > self.stop_speed:
                    ran = True
        return ran

    def distance_to_unserved(self, pos: np.ndarray, yaw: float, lookahead: float = 50.0) -> Optional[float]:
        best = None
        heading = np.array([math.cos(yaw), math.sin(yaw)])
        for sign, quad, fwd in self.signs:
            if float(np.dot(heading, fwd)) < 0.5:
                continue
            if self.inside.get(sign.id, math.inf) <= self.stop_speed:
                continue
            far = quad.mean(axis=0)
            rel = far - pos
            d = float(np.dot(rel, fwd))
            if 0.0 <= d <= lookahead and abs(float(np.dot(rel, [-fwd[1], fwd[0]]))) <= 2.5:
                if best is None or d < best:
                    best = d
        return best

