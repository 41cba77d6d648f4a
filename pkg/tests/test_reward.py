import functools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from carl.dynamics import ComfortMetric, EgoState
from carl.fixtures import fixture_map
from carl.reward import (
    PERSISTENCE_STEPS,
    InfractionKind,
    PenaltyLedger,
    RedLightMonitor,
    RewardOutput,
    Snapshot,
    StopSignTracker,
    SurvivalConfig,
    carl_reward,
    comfort_factor,
    shaped_reward,
    soft_penalty_product,
    speeding_factor,
    survival_adjusted,
    target_speed,
    terminal_check,
)
from carl.traffic import VEHICLE_EXTENT, AgentKind, AgentState

LIMIT = 10.0


def _car(x, y=0.0):
    return AgentState("a", AgentKind.VEHICLE, x, y, 0.0, 0.0, VEHICLE_EXTENT)


def _snap(v=5.0, **kw):
    kw.setdefault("speed_limit", LIMIT)
    return Snapshot(EgoState(v=v), **kw)


# --- terminal conditions -------------------------------------------------------


def test_terminal_examples():
    assert terminal_check(_snap(agents=[_car(1.0)])) == (InfractionKind.COLLISION, 1.0)
    assert terminal_check(_snap()) is None
    assert terminal_check(_snap(v=0.01, profile="nuplan", agents=[_car(1.0)])) is None
    assert terminal_check(_snap(v=1.0, profile="nuplan", agents=[_car(1.0)]))[0] is InfractionKind.COLLISION


def test_terminal_priority_and_values():
    everything = dict(off_road=True, ran_red_light=True, ran_stop_sign=True, route_lateral=31.0, stopped_time=91.0)
    assert terminal_check(_snap(agents=[_car(0.0)], **everything))[0] is InfractionKind.COLLISION
    expected = [
        ("off_road", InfractionKind.OFF_ROAD, 0.0),
        ("ran_red_light", InfractionKind.RUN_RED_LIGHT, 1.0),
        ("ran_stop_sign", InfractionKind.RUN_STOP_SIGN, 0.0),
        ("route_lateral", InfractionKind.ROUTE_DEVIATION, 0.0),
        ("stopped_time", InfractionKind.BLOCKED, 0.0),
    ]
    for i, (_, kind, value) in enumerate(expected):
        kw = {k: everything[k] for k, _, _ in expected[i:]}
        assert terminal_check(_snap(**kw)) == (kind, value)


def test_terminal_thresholds():
    assert terminal_check(_snap(route_lateral=30.0)) is None
    assert terminal_check(_snap(route_lateral=-30.5))[0] is InfractionKind.ROUTE_DEVIATION
    assert terminal_check(_snap(stopped_time=90.0)) is None


def test_nuplan_disables_rule_terminals():
    snap = _snap(profile="nuplan", ran_red_light=True, ran_stop_sign=True, route_lateral=50.0, stopped_time=200.0)
    assert terminal_check(snap) is None
    assert terminal_check(_snap(profile="nuplan", off_road=True))[0] is InfractionKind.OFF_ROAD


def test_kind_sets_disjoint():
    terminal = {k for k in InfractionKind if k.terminal}
    assert len(terminal) == 6
    assert len(set(InfractionKind) - terminal) == 5


# --- soft penalties ----------------------------------------------------------------


def test_soft_examples():
    over = LIMIT + 4.0 / 3.6
    assert soft_penalty_product(_snap(v=over), PenaltyLedger()) == pytest.approx(0.5)
    assert comfort_factor(3) == pytest.approx(0.75)
    assert soft_penalty_product(_snap(v=over, ttc=True), PenaltyLedger()) == pytest.approx(0.25)
    comfort = frozenset(list(ComfortMetric)[:3])
    assert soft_penalty_product(_snap(comfort=comfort), PenaltyLedger()) == pytest.approx(0.75)
    assert soft_penalty_product(_snap(outside_lanes=True), PenaltyLedger()) == 0.0


def test_lane_center_factor():
    assert soft_penalty_product(_snap(lane_center_distance=0.875), PenaltyLedger()) == pytest.approx(0.5)
    assert soft_penalty_product(_snap(lane_center_distance=None), PenaltyLedger()) == 1.0
    # nuPlan forgives the first half metre
    nu = _snap(profile="nuplan", lane_center_distance=0.5)
    assert soft_penalty_product(nu, PenaltyLedger.for_profile("nuplan")) == 1.0


@given(v=st.floats(0, 40), limit=st.floats(1, 30))
def test_speeding_factor_range(v, limit):
    f = speeding_factor(v, limit)
    assert 0.0 <= f <= 1.0
    assert (f == 1.0) == (v <= limit)


def test_ttc_persists_exactly_500_subsequent_steps():
    ledger = PenaltyLedger.for_profile("carla")
    assert soft_penalty_product(_snap(ttc=True), ledger) == 0.5
    products = [soft_penalty_product(_snap(), ledger) for _ in range(PERSISTENCE_STEPS + 5)]
    assert PERSISTENCE_STEPS == 500
    assert all(p <= 0.5 for p in products[:500])
    assert all(p == 1.0 for p in products[500:])


def test_ttc_retrigger_resets_counter():
    ledger = PenaltyLedger.for_profile("carla")
    soft_penalty_product(_snap(ttc=True), ledger)
    for _ in range(300):
        soft_penalty_product(_snap(), ledger)
    soft_penalty_product(_snap(ttc=True), ledger)
    assert ledger.remaining_fraction(InfractionKind.TTC) == 1.0
    products = [soft_penalty_product(_snap(), ledger) for _ in range(501)]
    assert products[499] == 0.5 and products[500] == 1.0
    assert ledger.product() == 1.0


def test_nuplan_ledger_persists_until_episode_end():
    ledger = PenaltyLedger.for_profile("nuplan")
    soft_penalty_product(_snap(profile="nuplan", ttc=True), ledger)
    assert all(soft_penalty_product(_snap(profile="nuplan"), ledger) == 0.5 for _ in range(2000))
    ledger.clear()
    assert ledger.product() == 1.0


def test_ledger_validation():
    with pytest.raises(ValueError):
        PenaltyLedger().trigger(InfractionKind.TTC, 1.5)
    with pytest.raises(ValueError):
        PenaltyLedger.for_profile("mars")


# --- reward --------------------------------------------------------------------------


def test_carl_reward_examples():
    assert carl_reward(0.2, 0.75).r_t == pytest.approx(0.15)
    out = carl_reward(0.3, 0.5, (InfractionKind.COLLISION, 1.0))
    assert out.terminated and out.r_t == pytest.approx(0.3 * 0.5 - 1.0)
    assert carl_reward(0.0, 1.0).r_t == 0.0
    with pytest.raises(ValueError):
        carl_reward(-0.1, 1.0)
    with pytest.raises(ValueError):
        carl_reward(0.1, 1.1)
    with pytest.raises(ValueError):
        RewardOutput(0.0, False, None, 1.0, 0.0, 1.0)


def test_survival_examples():
    cfg = SurvivalConfig()
    assert survival_adjusted(0.5, cfg) == pytest.approx(0.6)
    assert survival_adjusted(0.37, SurvivalConfig(s=0.0)) == 0.37
    assert math.fsum(survival_adjusted(0.0, cfg) for _ in range(cfg.N)) == pytest.approx(60.0, abs=1e-9)
    assert survival_adjusted(-1.0, cfg, terminal=True) == pytest.approx(-0.4)
    with pytest.raises(ValueError):
        SurvivalConfig(s=1.5)
    with pytest.raises(ValueError):
        SurvivalConfig(N=0)


def test_shaped_examples():
    snap = _snap(v=4.0, speed_limit=7.5)
    assert target_speed(7.5) == pytest.approx(6.0)
    assert shaped_reward(snap) == pytest.approx(1 - 2 / 7.5)
    assert target_speed(10.0, lead=20.5) == pytest.approx(8.0)
    assert target_speed(10.0, light=4.0) == 0.0
    dev = _snap(v=8.0, speed_limit=LIMIT, route_lateral=4.0)
    assert shaped_reward(dev) - shaped_reward(_snap(v=8.0)) == pytest.approx(2 * -0.5)


def test_shaped_terminals():
    base = shaped_reward(_snap(v=3.0))
    assert shaped_reward(_snap(v=3.0), InfractionKind.COLLISION) == pytest.approx(base - 4.0)
    assert shaped_reward(_snap(v=3.0), InfractionKind.ROUTE_DEVIATION) == pytest.approx(base - 1.0)
    assert shaped_reward(_snap(v=3.0, route_completed=True)) == pytest.approx(base + 1.0)


@given(
    steps=st.lists(
        st.tuples(
            st.floats(0, 5),
            st.floats(0, 20),
            st.booleans(),
            st.booleans(),
            st.sampled_from([None, InfractionKind.COLLISION, InfractionKind.OFF_ROAD, InfractionKind.BLOCKED]),
        ),
        max_size=80,
    )
)
def test_identity_and_bound_on_arbitrary_episodes(steps):
    ledger = PenaltyLedger.for_profile("carla")
    total_rc = ret = 0.0
    for rc, v, ttc, outside, term in steps:
        rc = min(rc, 100.0 - total_rc)
        total_rc += rc
        p = soft_penalty_product(_snap(v=v, ttc=ttc, outside_lanes=outside), ledger)
        t = (term, 1.0 if term is InfractionKind.COLLISION else 0.0) if term else None
        out = carl_reward(rc, p, t)
        assert out.r_t == out.rc_t * out.penalty_product - out.T
        ret += out.r_t
        if out.terminated:
            break
    assert ret <= 100.0 + 1e-9


# --- traffic-rule monitors -----------------------------------------------------------------


def test_red_light_crossing():
    g = fixture_map("intersection_red")
    mon = RedLightMonitor(g)
    assert mon.crossed(np.array([13.0, 1.75]), np.array([11.0, 1.75]), 0.0)
    assert not mon.crossed(np.array([11.0, 1.75]), np.array([13.0, 1.75]), 0.0)
    assert not mon.crossed(np.array([16.0, 1.75]), np.array([13.0, 1.75]), 0.0)
    assert mon.distance_to_red(np.array([20.0, 1.75]), math.pi, 0.0) == pytest.approx(8.0)
    assert mon.distance_to_red(np.array([20.0, 1.75]), 0.0, 0.0) is None


def test_stop_sign_needs_full_stop():
    g = fixture_map("intersection_stop")
    rolling = StopSignTracker(g)
    path = [(20.0, 3.0), (15.0, 3.0), (13.0, 3.0), (10.0, 3.0)]
    assert [rolling.update(np.array([x, 1.75]), math.pi, v) for x, v in path] == [False, False, False, True]
    stopping = StopSignTracker(g)
    path = [(20.0, 3.0), (15.0, 0.0), (13.0, 2.0), (10.0, 3.0)]
    assert not any(stopping.update(np.array([x, 1.75]), math.pi, v) for x, v in path)


# --- global optimum on a toy gridization ---------------------------------------------------

CELL, DT, CELLS, HORIZON = 5.0, 1.0, 8, 14
OBSTACLE = (4, {2, 3, 4})  # cell in lane 0 and the times it is occupied
RED_UNTIL, LIGHT_CELL = 6, 6
TOY_LIMIT = 8.0


def _toy_step(t, cell, lane, speed, acc, switch):
    """One transition of the toy corridor; rewards come from the library functions."""
    speed = min(2, max(0, speed + acc))
    lane = lane ^ switch
    new = min(cell + speed, CELLS)
    x, y = new * CELL, 3.5 * lane
    agents = [_car(OBSTACLE[0] * CELL)] if t + 1 in OBSTACLE[1] else []
    snap = Snapshot(
        EgoState(x=x, y=y, v=speed * CELL / DT),
        agents=agents,
        outside_lanes=lane == 1,
        speed_limit=TOY_LIMIT,
        ran_red_light=cell < LIGHT_CELL <= new and t + 1 <= RED_UNTIL,
    )
    term = terminal_check(snap)
    p = soft_penalty_product(snap, PenaltyLedger(persistence=0))
    out = carl_reward(100.0 * (new - cell) / CELLS, p, term)
    return out, (t + 1, new, lane, speed)


ACTIONS = [(a, s) for a in (-1, 0, 1) for s in (0, 1)]


@functools.lru_cache(maxsize=None)
def _best(t, cell, lane, speed):
    if t == HORIZON or cell == CELLS:
        return 0.0
    vals = []
    for acc, sw in ACTIONS:
        out, nxt = _toy_step(t, cell, lane, speed, acc, sw)
        vals.append(out.r_t + (0.0 if out.terminated else _best(*nxt)))
    return max(vals)


@functools.lru_cache(maxsize=None)
def _optimal_is_clean(t, cell, lane, speed):
    """True when every argmax continuation from here finishes the route cleanly."""
    if t == HORIZON or cell == CELLS:
        return cell == CELLS
    target = _best(t, cell, lane, speed)
    for acc, sw in ACTIONS:
        out, nxt = _toy_step(t, cell, lane, speed, acc, sw)
        value = out.r_t + (0.0 if out.terminated else _best(*nxt))
        if abs(value - target) > 1e-9:
            continue
        if out.terminated or (out.rc_t > 0 and out.penalty_product != 1.0):
            return False
        if not _optimal_is_clean(*nxt):
            return False
    return True


def test_global_optimum_completes_route_cleanly():
    start = (0, 0, 0, 0)
    assert _best(*start) == pytest.approx(100.0)
    # progress-free steps may still carry a soft penalty; they cost nothing
    assert _optimal_is_clean(*start)


def test_toy_mdp_has_tempting_infractions():
    # rushing at full speed is faster but either collides or runs the light
    state, ret, done = (0, 0, 0, 0), 0.0, False
    while not done and state[1] < CELLS:
        out, state = _toy_step(*state, 1, 0)
        ret += out.r_t
        done = out.terminated
    assert done and ret < 100.0
