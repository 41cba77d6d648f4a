import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carl.dynamics import agent_forecast_positions
from carl.fixtures import fixture_map
from carl.rng import stream
from carl.traffic import (
    _along_route,
    _lead_profile,
    SCENARIOS,
    VEHICLE_EXTENT,
    AgentKind,
    AgentScript,
    AgentState,
    IDMParams,
    TrafficManager,
    TrafficMode,
    build_scenario,
    constant_velocity_forecast,
    idm_accel,
    load_script,
    replay_step,
    save_script,
)
from carl.worldmap import generate_route, route_along_lanes


def _idm_reference(v, v_lead, gap, p):
    s_star = p.s0 + v * p.T + v * (v - v_lead) / (2 * math.sqrt(p.a_max * p.b))
    return p.a_max * (1 - (v / p.v0) ** 4 - (s_star / gap) ** 2)


def test_idm_examples():
    p = IDMParams()
    assert abs(idm_accel(p.v0, p.v0, 1e12, p)) < 1e-6
    assert idm_accel(0.0, 0.0, p.s0, p) == pytest.approx(0.0, abs=1e-12)
    a = idm_accel(10.0, 0.0, 10.0, p)
    assert a < -2
    assert a == pytest.approx(max(_idm_reference(10.0, 0.0, 10.0, p), -p.b_max))
    assert idm_accel(5.0, 5.0, 0.0, p) == -p.b_max
    assert idm_accel(5.0, 5.0, -1.0, p) == -p.b_max


@given(v=st.floats(0, 30), vl=st.floats(0, 30), gap=st.floats(0.1, 500))
def test_idm_clamped(v, vl, gap):
    p = IDMParams()
    assert -p.b_max <= idm_accel(v, vl, gap, p) <= p.a_max


def _script(frames, kind=AgentKind.VEHICLE, extent=VEHICLE_EXTENT):
    return AgentScript("a", kind, extent, np.asarray(frames, float))


def test_replay_interpolation():
    s = _script([[0, 0, 0, 0, 5], [2, 10, 0, 0, 5]])
    (a,) = replay_step([s], 1.0)
    assert (a.x, a.y) == (5.0, 0.0)
    (a,) = replay_step([s], 2.0)
    assert (a.x, a.y) == (10.0, 0.0)
    (a,) = replay_step([s], 99.0)
    assert (a.x, a.y) == (10.0, 0.0)
    assert replay_step([], 3.0) == []


def test_replay_yaw_takes_short_way():
    s = _script([[0, 0, 0, math.pi - 0.1, 1], [1, 0, 0, -math.pi + 0.1, 1]])
    (a,) = replay_step([s], 0.5)
    assert abs(abs(a.yaw) - math.pi) < 1e-9


def test_script_validation():
    with pytest.raises(ValueError):
        _script([[1, 0, 0, 0, 0], [0, 1, 0, 0, 0]])
    with pytest.raises(ValueError):
        AgentState("x", AgentKind.VEHICLE, 0, 0, 0, 1.0, (0.0, 1.0))
    with pytest.raises(ValueError):
        AgentState("x", AgentKind.STATIC, 0, 0, 0, 1.0, (1.0, 1.0))


def test_script_file_roundtrip(tmp_path):
    s = _script([[0, 0, 0, 0, 5], [2, 10, 1, 0.5, 4]])
    save_script([s], tmp_path / "s.json")
    (back,) = load_script(tmp_path / "s.json")
    assert np.array_equal(back.keyframes, s.keyframes)
    assert back.kind == s.kind and back.extent == s.extent


def test_constant_velocity_forecast():
    a = AgentState("a", AgentKind.VEHICLE, 1.0, 2.0, 0.0, 0.0, VEHICLE_EXTENT)
    seg = constant_velocity_forecast(a, 1.0)
    assert np.array_equal(seg[0], seg[1])
    a = AgentState("a", AgentKind.VEHICLE, 1.0, 2.0, 0.0, 10.0, VEHICLE_EXTENT)
    assert constant_velocity_forecast(a, 1.0)[1] == pytest.approx([11.0, 2.0])
    with pytest.raises(ValueError):
        constant_velocity_forecast(a, -1.0)


@given(x=st.floats(-50, 50), y=st.floats(-50, 50), yaw=st.floats(-3.1, 3.1), v=st.floats(0, 20))
def test_forecast_matches_ttc_positions(x, y, yaw, v):
    a = AgentState("a", AgentKind.VEHICLE, x, y, yaw, v, VEHICLE_EXTENT)
    end = constant_velocity_forecast(a, 1.0)[1]
    pos = agent_forecast_positions(x, y, yaw, v, 0.2, 5)
    assert np.allclose(pos[-1], end, atol=1e-9)
    assert np.allclose(pos[0], [x, y])


def _follow_run(lead_v, decel, t_brake, gap0, follow_v, params, steps=600, dt=0.1):
    g = fixture_map("straight_long")
    lane = "A-B/0"
    y = g.lanes[lane].centerline[0, 1]
    x_f = 10.0
    x_l = x_f + VEHICLE_EXTENT[0] * 2 + gap0
    t = np.arange(0, steps * dt + 1.0, 0.1)
    tb = np.clip(t - t_brake, 0, None)
    stop = lead_v / decel
    s = np.where(t < t_brake, lead_v * t, lead_v * t_brake + lead_v * np.minimum(tb, stop) - 0.5 * decel * np.minimum(tb, stop) ** 2)
    speed = np.where(t < t_brake, lead_v, np.maximum(0, lead_v - decel * tb))
    leader = AgentScript("lead", AgentKind.VEHICLE, VEHICLE_EXTENT, np.column_stack([t, x_l + s, np.full_like(t, y), np.zeros_like(t), speed]))
    follower = AgentScript("f", AgentKind.VEHICLE, VEHICLE_EXTENT, [[0, x_f, y, 0, follow_v], [1, x_f + follow_v, y, 0, follow_v]], lane, reactive=True)
    tm = TrafficManager(g, [leader, follower], TrafficMode.REACTIVE, params)
    min_gap = math.inf
    for k in range(steps):
        agents = {a.id: a for a in tm.step(k * dt, dt)}
        gap = agents["lead"].x - agents["f"].x - 2 * VEHICLE_EXTENT[0]
        min_gap = min(min_gap, gap)
    return min_gap


@settings(max_examples=25)
@given(
    lead_v=st.floats(3, 13),
    decel=st.floats(0.5, 4.0),
    t_brake=st.floats(0, 30),
    gap0=st.floats(2.5, 40),
    follow_ratio=st.floats(0, 1),
    T=st.floats(1.0, 2.0),
    s0=st.floats(1.0, 3.0),
    a_max=st.floats(1.0, 2.0),
    b=st.floats(1.5, 3.0),
)
def test_idm_follower_never_overlaps_leader(lead_v, decel, t_brake, gap0, follow_ratio, T, s0, a_max, b):
    params = IDMParams(s0=s0, T=T, a_max=a_max, b=b)
    gap0 = max(gap0, s0 + 0.5)
    assert _follow_run(lead_v, decel, t_brake, gap0, follow_ratio * lead_v, params) > 0


def test_replay_bit_identical_across_runs():
    g = fixture_map("town")
    route = generate_route(g, stream(1, "r"), 200, 0.1)
    out = []
    for _ in range(2):
        script = build_scenario("lead_vehicle_brake", route, g, stream(4, "sc"))
        tm = TrafficManager(g, script, TrafficMode.REPLAY)
        out.append([(a.x, a.y, a.yaw, a.speed) for k in range(100) for a in tm.step(0.1 * k, 0.1)])
    assert out[0] == out[1]


@pytest.mark.parametrize("name", SCENARIOS)
def test_scenarios_place_agents_near_route(name):
    g = fixture_map("intersection_lights")
    route = route_along_lanes(g, ["E-C/0", "E-C/0>C-W/0", "C-W/0"], 0.0, 150)
    script = build_scenario(name, route, g, stream(2, name))
    assert len(script) == 1
    states = [script[0].state_at(t) for t in np.arange(0, 30, 0.5)]
    d = [np.min(np.hypot(*(route.dense_path - (s.x, s.y)).T)) for s in states]
    assert min(d) < 3.0


def test_unknown_scenario():
    g = fixture_map("straight")
    route = route_along_lanes(g, ["A-B/0"], 0.0, 100)
    with pytest.raises(ValueError):
        build_scenario("alien_invasion", route, g, stream(0, "x"))


@given(
    s0=st.floats(0, 50),
    v=st.floats(3, 10),
    t_brake=st.floats(0.5, 8),
    decel=st.floats(2, 6),
    hold=st.floats(0.5, 5),
    accel=st.floats(1, 3),
)
def test_lead_profile_is_consistent(s0, v, t_brake, decel, hold, accel):
    t = np.linspace(0, 40, 4001)
    s, speed = _lead_profile(t, s0, v, t_brake, decel, hold, accel)
    assert np.all(np.diff(s) >= -1e-9)
    assert np.all((speed >= -1e-12) & (speed <= v + 1e-9))
    # arc length is the integral of speed (trapezoid rule is exact for piecewise-linear speed)
    integral = s0 + np.concatenate([[0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(t))])
    assert np.allclose(s, integral, atol=1e-6)
    stopped = t[speed == 0.0]
    assert stopped.max() - stopped.min() == pytest.approx(hold, abs=0.02)
    assert speed[-1] == v and s[-1] > s0 + v * t_brake


def test_lead_vehicle_drives_on_after_stopping():
    g = fixture_map("straight")
    route = route_along_lanes(g, ["A-B/0"], 0.0, 100)
    lead = build_scenario("lead_vehicle_brake", route, g, stream(3, "sc"))[0]
    speeds = [lead.state_at(t).speed for t in np.arange(0, 60, 0.5)]
    first_stop = speeds.index(0.0)
    assert max(speeds[first_stop:]) > 4.0
    # past the end of the route it keeps going instead of parking on the finish
    far = lead.state_at(60.0)
    assert far.x - route.dense_path[-1][0] > 50.0


def test_along_route_extrapolates_past_end():
    g = fixture_map("straight")
    route = route_along_lanes(g, ["A-B/0"], 0.0, 100)
    pos, _ = _along_route(route, np.array([50.0, 100.0, 110.0]))
    assert np.allclose(pos[2] - pos[1], 10.0 * route.tangents[-1])
    assert np.allclose(pos[1], route.dense_path[-1])
