"""Episode orchestration: map, ego dynamics, traffic, reward and observations behind reset/step."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from carl import dynamics as dyn
from carl.dynamics import ACTION_LIMITS, Action, ComfortWindow, EgoState, comfort_violations, map_action, step_bicycle, steer_rate_for, ttc_violated
from carl.fixtures import FIXTURES, fixture_map
from carl.geometry import box_corners, boxes_overlap, interpolate_polyline, polyline_lengths
from carl.observation import BevSpec, Scene, critic_extras, measurement_size, measurements, rasterize_u8
from carl.reward import (
    BLOCKED_SPEED,
    InfractionKind,
    PenaltyLedger,
    RedLightMonitor,
    Snapshot,
    StopSignTracker,
    SurvivalConfig,
    carl_reward,
    shaped_reward,
    soft_penalty_product,
    survival_adjusted,
    terminal_check,
)
from carl.rng import stream
from carl.traffic import (
    VEHICLE_EXTENT,
    AgentKind,
    AgentScript,
    AgentState,
    IDMParams,
    TrafficManager,
    TrafficMode,
    build_scenario,
    lane_chain,
    script_to_doc,
)
from carl.worldmap import MapGraph, Route, build_map, generate_route, project_to_route, route_along_lanes, route_completion_delta

NUPLAN_HORIZON = 150
TIMEOUT_SPEED = 1.0  # m/s; the carla-like time budget assumes at least this average speed


class EnvError(RuntimeError):
    pass


@dataclass
class EnvConfig:
    profile: str = "carla"
    reward: Optional[str] = None  # carla | nuplan | shaped; defaults to the profile
    map: str = "straight"
    route_length: float = 200.0
    lane_change_prob: float = 0.1
    route_lanes: Optional[list] = None  # fixed lane chain instead of sampling
    route_start_s: float = 0.0
    dt: float = 0.1
    horizon: Optional[int] = None
    eval_20hz: bool = False
    raster: str = "desk"
    scenarios: list = field(default_factory=list)
    scenario_prob: float = 1.0
    background_vehicles: int = 0
    traffic_modes: dict = field(default_factory=lambda: {"reactive": 0.5, "replay": 0.5})
    initial_speed: tuple = (0.0, 0.0)
    survival_s: float = 0.6
    survival_n: int = NUPLAN_HORIZON
    record: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.profile not in ("carla", "nuplan"):
            raise ValueError(f"env.profile must be 'carla' or 'nuplan', got {self.profile!r}")
        if self.reward_profile not in ("carla", "nuplan", "shaped"):
            raise ValueError(f"reward.profile must be carla, nuplan or shaped, got {self.reward!r}")
        if self.dt <= 0:
            raise ValueError("env.dt must be positive")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("env.horizon must be at least 1")
        if self.route_length <= 0:
            raise ValueError("env.route_length must be positive")
        if not 0 <= self.lane_change_prob <= 1 or not 0 <= self.scenario_prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        modes = {TrafficMode(k): float(v) for k, v in self.traffic_modes.items()}
        if any(v < 0 for v in modes.values()) or sum(modes.values()) <= 0:
            raise ValueError("env.traffic_modes needs non-negative weights with a positive sum")
        lo, hi = self.initial_speed
        if lo < 0 or hi < lo:
            raise ValueError("env.initial_speed must be a range [lo, hi] with 0 <= lo <= hi")
        if self.raster not in ("desk", "paper"):
            raise ValueError("env.raster must be 'desk' or 'paper'")

    @property
    def reward_profile(self) -> str:
        return self.reward or self.profile

    @property
    def episode_horizon_fixed(self) -> Optional[int]:
        if self.horizon is not None:
            return self.horizon
        return NUPLAN_HORIZON if self.profile == "nuplan" else None

    @classmethod
    def for_profile(cls, profile: str, **kw) -> "EnvConfig":
        if profile == "nuplan":
            kw.setdefault("initial_speed", (3.0, 10.0))
            kw.setdefault("route_length", 250.0)
        return cls(profile=profile, **kw)


@dataclass
class StepResult:
    obs: tuple
    reward: float
    terminated: bool
    truncated: bool
    info: dict


def load_map(name_or_path: str) -> MapGraph:
    if name_or_path in FIXTURES:
        return fixture_map(name_or_path)
    return build_map(name_or_path)


class CarlEnv:
    """One driving episode state machine.

    Observations are ``(raster uint8 [C, H, W], measurements, critic extras)``.
    """

    def __init__(self, cfg: EnvConfig, graph: Optional[MapGraph] = None):
        self.cfg = cfg
        self.graph = graph if graph is not None else load_map(cfg.map)
        self.limits = ACTION_LIMITS[cfg.profile]
        self.spec = BevSpec.for_profile(cfg.profile, cfg.raster)
        self.sim_dt = cfg.dt / 2 if cfg.eval_20hz else cfg.dt
        self.substeps = 2 if cfg.eval_20hz else 1
        self.red_lights = RedLightMonitor(self.graph)
        self.stop_signs = StopSignTracker(self.graph)
        self.survival = SurvivalConfig(cfg.survival_s, cfg.survival_n)
        self.done = True
        self.route: Optional[Route] = None
        self.log: Optional[dict] = None

    # -- shapes -------------------------------------------------------------

    @property
    def raster_shape(self) -> tuple:
        return self.spec.shape

    @property
    def n_meas(self) -> int:
        return measurement_size(self.cfg.profile)

    # -- reset --------------------------------------------------------------

    def _spawn_clear(self, route: Route, script: Sequence[AgentScript]) -> bool:
        ego = box_corners(*route.dense_path[0], math.atan2(route.tangents[0, 1], route.tangents[0, 0]), dyn.EGO_EXTENT[0] + 2.0, dyn.EGO_EXTENT[1] + 0.5)
        for a in script:
            s = a.state_at(0.0)
            if boxes_overlap(ego, box_corners(s.x, s.y, s.yaw, *s.extent)):
                return False
        return True

    def _background(self, rng: np.random.Generator, route: Route, horizon_s: float) -> list[AgentScript]:
        out = []
        lanes = [l for l in self.graph.lanes.values() if not l.in_intersection]
        placed = [route.dense_path[0]]
        tries = 0
        while len(out) < self.cfg.background_vehicles and tries < 50 * max(1, self.cfg.background_vehicles):
            tries += 1
            lane = lanes[rng.integers(len(lanes))]
            s0 = float(rng.uniform(0, lane.length))
            p = lane.point_at([s0])[0]
            if min(np.hypot(*(p - q)) for q in placed) < 15.0:
                continue
            path, ids, _ = lane_chain(self.graph, lane.id, 300.0)
            cum = polyline_lengths(path)
            start = float(np.argmin(np.hypot(path[:, 0] - p[0], path[:, 1] - p[1])))
            start = float(cum[int(start)])
            v = lane.speed_limit * float(rng.uniform(0.4, 0.8))
            t = np.arange(0.0, horizon_s + 1e-9, 0.5)
            s = np.minimum(start + v * t, cum[-1])
            pos = interpolate_polyline(path, cum, s)
            ahead = interpolate_polyline(path, cum, np.minimum(s + 0.5, cum[-1]))
            d = ahead - pos
            d[np.hypot(d[:, 0], d[:, 1]) < 1e-9] = path[-1] - path[-2]
            yaw = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
            speed = np.where(s < cum[-1], v, 0.0)
            out.append(AgentScript(f"bg{len(out)}", AgentKind.VEHICLE, VEHICLE_EXTENT, np.column_stack([t, pos, yaw, speed]), lane.id, reactive=True))
            placed.append(p)
        return out

    def reset(self, seed: int, route_seed: Optional[int] = None) -> tuple:
        """Start an episode. ``route_seed`` pins the route (it matches the route
        ``reset(route_seed)`` would draw) while ``seed`` drives everything else."""
        cfg = self.cfg
        rng = stream(seed, "reset")
        if cfg.route_lanes:
            route = route_along_lanes(self.graph, list(cfg.route_lanes), cfg.route_start_s, cfg.route_length)
        elif route_seed is not None:
            route = generate_route(self.graph, stream(route_seed, "reset"), cfg.route_length, cfg.lane_change_prob)
        else:
            route = generate_route(self.graph, rng, cfg.route_length, cfg.lane_change_prob)
        fixed = cfg.episode_horizon_fixed
        self.horizon = fixed if fixed is not None else int(math.ceil(route.total_length / TIMEOUT_SPEED / cfg.dt))
        horizon_s = self.horizon * cfg.dt + 1.0
        script: list[AgentScript] = []
        if cfg.scenarios and rng.random() < cfg.scenario_prob:
            name = cfg.scenarios[rng.integers(len(cfg.scenarios))]
            script += build_scenario(name, route, self.graph, rng)
        script += self._background(rng, route, horizon_s)
        if not self._spawn_clear(route, script):
            script = [a for a in script if self._spawn_clear(route, [a])]
        modes = {TrafficMode(k): float(v) for k, v in cfg.traffic_modes.items()}
        keys = sorted(modes, key=lambda m: m.value)
        w = np.array([modes[k] for k in keys])
        self.mode = keys[int(rng.choice(len(keys), p=w / w.sum()))]
        self.traffic = TrafficManager(self.graph, script, self.mode, IDMParams())
        self.script = script
        p0, t0 = route.dense_path[0], route.tangents[0]
        v0 = float(rng.uniform(*cfg.initial_speed)) if cfg.initial_speed[1] > 0 else 0.0
        self.ego = EgoState(float(p0[0]), float(p0[1]), math.atan2(t0[1], t0[0]), v0)
        route.reset_progress()
        self.route = route
        self.t = 0.0
        self.steps = 0
        self.sim_steps = 0
        self.stopped_time = 0.0
        self.ledger = PenaltyLedger.for_profile(cfg.profile)
        self.comfort = ComfortWindow.for_profile(cfg.profile)
        self.comfort.push_state(0.0, self.ego)
        self.stop_signs.reset()
        self.last_action: Optional[Action] = None
        self.prev_yaw_rate: Optional[float] = None
        self.agents = self.traffic.agents_at(0.0)
        self.done = False
        self.stats = {"return": 0.0, "rc": 0.0, "length": 0, "terminal": None, "route_completed": False, "infractions": {}, "speed_sum": 0.0, "collision_with": None}
        lq = self.graph.nearest_lane(self.ego.position, self.ego.yaw)
        self.speed_limit = lq.lane.speed_limit
        self.seed = seed
        if cfg.record:
            self.log = {
                "map": cfg.map,
                "seed": seed,
                "config": asdict(cfg),
                "route": route.to_dict(),
                "script": script_to_doc(script),
                "traffic_mode": self.mode.value,
                "steps": [self._log_row(None, 0.0, {})],
            }
        return self._observe()

    # -- step ---------------------------------------------------------------

    def _observe(self) -> tuple:
        served = frozenset(k for k, v in self.stop_signs.inside.items() if v <= self.stop_signs.stop_speed)
        scene = Scene(self.graph, self.route, self.agents, self.t, served)
        raster = rasterize_u8(scene, self.ego, self.spec)
        meas = measurements(self.ego, self.last_action, self.speed_limit, self.cfg.profile, self.prev_yaw_rate, self.sim_dt)
        extras = critic_extras(self.steps, self.horizon, self.stopped_time, self.route.best_progress_s, self.route.total_length, self.ledger)
        return raster, meas, extras

    def _lane_info(self, ego: EgoState):
        """(outside_lanes, lane-center distance or None, lane half width, speed limit)."""
        pos = ego.position
        if self.graph.on_sidewalk(*pos):
            outside = True
        else:
            containing = self.graph.lanes_containing(pos)
            aligned = []
            for lane in containing:
                s, _ = lane.project(pos)
                if math.cos(lane.heading_at(s) - ego.yaw) > 0:
                    aligned.append(lane)
            outside = bool(containing) and not aligned
        q = self.graph.nearest_lane(pos, ego.yaw)
        centre = None if q.lane.in_intersection else q.distance
        return outside, centre, q.lane.width / 2, q.lane.speed_limit

    def _collision_partner(self) -> Optional[str]:
        ego = dyn.ego_box(self.ego).corners()
        for a in self.agents:
            if boxes_overlap(ego, box_corners(a.x, a.y, a.yaw, *a.extent)):
                return a.kind.value
        return None

    def _sim_step(self, action: Action) -> tuple[float, Optional[InfractionKind], dict]:
        cfg = self.cfg
        prev = self.ego
        accel, target = map_action(action, self.limits)
        rate = steer_rate_for(prev, target, self.limits, self.sim_dt)
        self.ego = step_bicycle(prev, accel, rate, self.sim_dt, self.limits.steer)
        self.t += self.sim_dt
        self.sim_steps += 1
        red_points = []
        if self.mode == TrafficMode.REACTIVE:
            red_points = [0.5 * (l.stop_line[0] + l.stop_line[1]) for l in self.graph.traffic_lights if l.state(self.t) != "green"]
        self.agents = self.traffic.step(self.t - self.sim_dt, self.sim_dt, self.ego, dyn.EGO_EXTENT, red_points)
        self.comfort.push_state(self.t, self.ego)
        violations = comfort_violations(self.comfort)
        ttc = ttc_violated(self.ego, self.agents)
        outside, centre, half_width, limit = self._lane_info(self.ego)
        self.speed_limit = limit
        pos = self.ego.position
        ran_red = self.red_lights.crossed(prev.position, pos, self.t)
        ran_stop = self.stop_signs.update(pos, self.ego.yaw, self.ego.v)
        self.stopped_time = self.stopped_time + self.sim_dt if self.ego.v <= BLOCKED_SPEED else 0.0
        rc = route_completion_delta(self.route, pos)
        _, lateral = project_to_route(self.route, pos)
        completed = self.route.best_progress_s >= self.route.total_length - 1e-9
        snap = Snapshot(
            ego=self.ego,
            agents=self.agents,
            profile="nuplan" if cfg.reward_profile == "nuplan" else "carla",
            route_lateral=lateral,
            off_road=not self.graph.is_drivable(*pos),
            outside_lanes=outside,
            lane_center_distance=centre,
            lane_half_width=half_width,
            speed_limit=limit,
            ran_red_light=ran_red,
            ran_stop_sign=ran_stop,
            stopped_time=self.stopped_time,
            ttc=ttc,
            comfort=violations,
            travel=float(np.hypot(*(pos - prev.position))),
            steer_delta=self.ego.steer - prev.steer,
            lead_distance=self._lead_distance(),
            red_light_distance=self.red_lights.distance_to_red(pos, self.ego.yaw, self.t),
            stop_sign_distance=self.stop_signs.distance_to_unserved(pos, self.ego.yaw),
            route_completed=completed,
        )
        terminal = terminal_check(snap)
        product = soft_penalty_product(snap, self.ledger)
        out = carl_reward(rc, product, terminal)
        kind = out.terminal_kind
        if cfg.reward_profile == "shaped":
            r = shaped_reward(snap, kind)
        elif cfg.reward_profile == "nuplan":
            r = survival_adjusted(out.r_t, self.survival, terminal=out.terminated)
        else:
            r = out.r_t
        info = {"rc": rc, "penalty_product": product, "r_carl": out.r_t, "T": out.T, "route_completed": completed}
        soft = []
        if outside:
            soft.append(InfractionKind.OUTSIDE_LANES)
        if ttc:
            soft.append(InfractionKind.TTC)
        if violations:
            soft.append(InfractionKind.COMFORT)
        if self.ego.v > limit:
            soft.append(InfractionKind.SPEEDING)
        info["soft"] = [k.value for k in soft]
        if kind == InfractionKind.COLLISION:
            info["collision_with"] = self._collision_partner()
        return r, kind, info

    def _lead_distance(self) -> Optional[float]:
        """Bumper gap to the nearest agent ahead in a 2 m corridor around the route."""
        best = None
        c, s = math.cos(self.ego.yaw), math.sin(self.ego.yaw)
        for a in self.agents:
            dx, dy = a.x - self.ego.x, a.y - self.ego.y
            fwd = dx * c + dy * s
            if fwd <= 0 or fwd > 40:
                continue
            if abs(-dx * s + dy * c) > 2.0 + a.extent[1]:
                continue
            gap = fwd - dyn.EGO_EXTENT[0] - a.extent[0]
            if best is None or gap < best:
                best = gap
        return best

    def step(self, action) -> StepResult:
        if self.done:
            raise EnvError("step() called on a finished episode; call reset() first")
        action = action if isinstance(action, Action) else Action.clipped(np.asarray(action, float))
        total = 0.0
        kind = None
        info: dict = {}
        yaw_rate_before = self.ego.yaw_rate
        for _ in range(self.substeps):
            r, kind, info = self._sim_step(action)
            total += r
            if kind is not None or info["route_completed"]:
                break
        self.prev_yaw_rate = yaw_rate_before
        self.last_action = action
        self.steps += 1
        completed = info["route_completed"] and self.cfg.profile == "carla"
        terminated = kind is not None or completed
        truncated = not terminated and self.steps >= self.horizon
        st = self.stats
        st["return"] += total
        st["rc"] += info["rc"]
        st["length"] += 1
        st["speed_sum"] += self.ego.v
        for k in info["soft"]:
            st["infractions"][k] = st["infractions"].get(k, 0) + 1
        if kind is not None:
            st["terminal"] = kind.value
            st["infractions"][kind.value] = st["infractions"].get(kind.value, 0) + 1
            st["collision_with"] = info.get("collision_with")
        st["route_completed"] = st["route_completed"] or info["route_completed"]
        info["terminal"] = kind.value if kind else None
        if self.log is not None:
            self.log["steps"].append(self._log_row(action, total, info))
        self.done = terminated or truncated
        if self.done:
            info["episode"] = dict(
                st,
                route_km=self.route.total_length / 1000.0,
                duration_s=self.t,
                mean_speed=st["speed_sum"] / max(1, st["length"]),
                seed=self.seed,
            )
        obs = self._observe()
        return StepResult(obs, float(total), terminated, truncated, info)

    # -- replay log ---------------------------------------------------------

    def _log_row(self, action: Optional[Action], reward: float, info: dict) -> dict:
        e = self.ego
        return {
            "t": round(self.t, 6),
            "ego": [e.x, e.y, e.yaw, e.v, e.accel, e.steer, e.steer_rate, e.yaw_rate, e.accel_lat],
            "action": [action.accel_brake, action.steer_cmd] if action else None,
            "reward": reward,
            "rc": info.get("rc", 0.0),
            "terminal": info.get("terminal"),
            "soft": info.get("soft", []),
            "agents": [a.to_dict() for a in self.agents],
        }

    def save_replay(self, path: str | Path) -> None:
        if self.log is None:
            raise EnvError("recording is off (set env.record = true)")
        Path(path).write_text(json.dumps(self.log))


def load_replay(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def replay_frame(replay: dict, index: int, raster: Optional[str] = None) -> np.ndarray:
    """Re-render step ``index`` of a replay as a float raster."""
    steps = replay["steps"]
    if not 0 <= index < len(steps):
        raise IndexError(f"step {index} outside replay of {len(steps)} frames")
    cfg = replay["config"]
    graph = load_map(replay["map"])
    spec = BevSpec.for_profile(cfg["profile"], raster or cfg["raster"])
    row = steps[index]
    ego = EgoState(*row["ego"][:3], row["ego"][3])
    agents = [AgentState.from_dict(a) for a in row["agents"]]
    scene = Scene(graph, Route.from_dict(replay["route"]), agents, row["t"])
    return rasterize_u8(scene, ego, spec).astype(np.float32) / 255.0


class SleepyEnv:
    """Wraps an env with a deterministic per-step sleep, to emulate uneven simulator step times."""

    def __init__(self, env, index: int, base: float = 0.002, spread: float = 4.0, seed: int = 0):
        self.env = env
        self.rng = stream(seed, "sleep", index)
        self.base = base
        self.spread = spread

    def __getattr__(self, name):
        return getattr(self.env, name)

    def reset(self, seed: int, route_seed: Optional[int] = None):
        return self.env.reset(seed, route_seed)

    def step(self, action):
        time.sleep(self.base * (1.0 + self.spread * float(self.rng.random())))
        return self.env.step(action)


def make_envs(cfg: EnvConfig, n: int) -> list[CarlEnv]:
    graph = load_map(cfg.map)
    return [CarlEnv(cfg, graph) for _ in range(n)]
