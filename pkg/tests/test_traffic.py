import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critgen import traffic
from critgen.risk import RiskParams
from critgen.scenario import ScenarioConfig, VehicleSeed, empty_config, sample_config
from critgen.traffic import (
    LANE_CHANGE_DURATION, OBS_SIZE, SIM_FREQUENCY, Action, HighwayEnv, SpawnError,
    background_collisions, observe, overlaps, read_trace, reward_for, run_episode, scripted, spawn, step,
    write_trace,
)


def pair_config(xi=100.0, vi=30.0, xj=120.0, vj=20.0, lane=1, lanes=3, extra=0):
    seeds = (VehicleSeed(xi, lane, vi, 0.0, "regular", "car"), VehicleSeed(xj, lane, vj, 0.0, "regular", "car"))
    return ScenarioConfig("pair", 0, 0, 2 + extra, 0, 2 + extra, density=10.0, lane_count=lanes, seed=3,
                          critical_pair=seeds)


def test_spawn_empty_is_ego_only():
    w = spawn(empty_config())
    assert w.n == 1 and w.ego.behavior_class == "ego"


def test_spawn_counts_and_classes():
    c = sample_config(11)
    w = spawn(c)
    assert w.n == c.num_vehicles + 1
    classes = [v.behavior_class for v in w.others]
    kinds = [v.kind for v in w.others]
    for b, n in c.behavior_counts().items():
        assert classes.count(b) == n
    for k, n in c.kind_counts().items():
        assert kinds.count(k) == n
    assert not background_collisions(w)


def test_spawn_places_pair_verbatim():
    w = spawn(pair_config())
    got = {(round(v.x, 9), v.lane, v.vx) for v in w.others}
    assert {(100.0, 1, 30.0), (120.0, 1, 20.0)} <= got
    assert w.ego.lane == 1


def test_spawn_deterministic():
    c = sample_config(5)
    assert spawn(c) == spawn(c)
    assert spawn(c, seed=1) != spawn(c, seed=2)


def test_spawn_error_when_road_too_short(monkeypatch):
    monkeypatch.setattr(traffic, "ROAD_LENGTH", 60.0)
    c = ScenarioConfig("full", 10, 10, 10, 10, 20, density=60.0, lane_count=2)
    with pytest.raises(SpawnError):
        spawn(c)


def test_faster_alone_accelerates_to_cap():
    w = spawn(empty_config())
    speeds = [w.vx[0]]
    for _ in range(20):
        w, _, done, info = step(w, Action.FASTER)
        assert not info.crashed
        speeds.append(w.vx[0])
        if done:
            break
    assert all(b >= a - 1e-9 for a, b in zip(speeds, speeds[1:]))
    assert max(speeds) == pytest.approx(traffic.EGO_MAX_SPEED, abs=0.5)


def test_stopped_leader_crash_within_one_second():
    # leader centre 10 m ahead: 5 m bumper gap for two 5 m cars
    w = spawn(pair_config(xi=10.0, vi=0.0, xj=400.0, vj=20.0, lane=0, lanes=2))
    w = w.copy(vx=np.where(np.arange(w.n) == 0, 30.0, w.vx),
               target_speed=np.where(np.arange(w.n) == 0, 30.0, w.target_speed))
    w2, reward, done, info = step(w, Action.IDLE)
    assert done and info.crashed and reward == traffic.REWARD_CRASH
    assert w2.time <= 1.0


def test_step_deterministic_and_pure():
    w = spawn(sample_config(2))
    before = w.copy()
    a = step(w, Action.LANE_LEFT)
    b = step(w, Action.LANE_LEFT)
    assert a[0] == b[0] and a[1:3] == b[1:3]
    assert w == before
    with pytest.raises(ValueError):
        step(w, 7)


def test_empty_idle_episode():
    res = run_episode(empty_config(), scripted([]), max_steps=40)
    assert not res.crashed and res.length == 40
    assert res.risk.ttc_near_miss_count == 0 and res.risk.r_threshold_count == 0
    assert math.isinf(res.risk.min_ttc)


def test_end_of_road_truncates_without_crash():
    res = run_episode(empty_config(), scripted([Action.FASTER] * 5))
    assert not res.crashed and res.length < traffic.MAX_EPISODE_STEPS


def test_closing_on_slow_leader_crashes_with_near_miss():
    # both lanes blocked side by side, so the leader cannot yield
    seeds = (VehicleSeed(60.0, 0, 0.0, 0.0, "defensive", "truck"), VehicleSeed(60.0, 1, 0.0, 0.0, "defensive", "truck"))
    c = ScenarioConfig("wall", 0, 2, 0, 2, 0, density=2.0, lane_count=2, critical_pair=seeds)
    res = run_episode(c, scripted([Action.FASTER] * 10))
    assert res.crashed
    assert res.risk.ttc_near_miss_count >= 1
    assert res.length <= traffic.MAX_EPISODE_STEPS


def test_risk_counts_sum_step_exceedances():
    params = RiskParams()
    env = HighwayEnv(params)
    env.reset(sample_config(9), seed=4)
    ttc_hits = r_hits = 0
    done = False
    while not done:
        _, _, done, info = env.step(Action.FASTER)
        ttc_hits += info.risk.ttc < params.ttc_threshold
        r_hits += info.risk.r > params.r_threshold
    res = env.result()
    assert (res.risk.ttc_near_miss_count, res.risk.r_threshold_count) == (ttc_hits, r_hits)


def test_episode_deterministic():
    c = sample_config(21)
    pol = scripted([3, 3, 0, 1, 2, 4, 3] * 20)
    a = run_episode(c, pol, seed=8)
    b = run_episode(c, scripted([3, 3, 0, 1, 2, 4, 3] * 20), seed=8)
    assert a == b


def test_observe_shape_and_empty_slots():
    obs = observe(spawn(empty_config()))
    assert obs.shape == (OBS_SIZE,)
    assert np.all(obs[traffic.EGO_FEATURES:] == 0)
    assert np.all(np.abs(obs) <= 1)


def test_observe_normalisation_boundary():
    w = spawn(pair_config(xi=100.0, vi=20.0, xj=500.0, vj=20.0, lane=0, lanes=2))
    obs = observe(w)
    slot = obs[traffic.EGO_FEATURES:traffic.EGO_FEATURES + traffic.NEIGHBOR_FEATURES]
    assert slot[0] == 1.0 and slot[1] == 1.0


def test_observe_ignores_internal_order():
    w = spawn(sample_config(13))
    perm = np.concatenate([[0], 1 + np.random.default_rng(0).permutation(w.n - 1)])
    arrays = {name: getattr(w, name)[perm] for name in traffic._ARRAY_FIELDS}
    w2 = w.copy(**arrays)
    assert np.array_equal(observe(w), observe(w2))


def test_observe_tie_break_by_id():
    w = spawn(pair_config(xi=30.0, vi=20.0, xj=970.0, vj=20.0, lane=0, lanes=2))  # +30 m and -30 m
    obs = observe(w)
    first = obs[traffic.EGO_FEATURES + 1]
    ids = {round(float(traffic._ring_dx(w.x[i], 0.0, 1000.0)), 6): w.ids[i] for i in range(1, w.n)}
    assert first == pytest.approx((30.0 if ids[30.0] < ids[-30.0] else -30.0) / 100.0)


def test_no_teleport_and_lateral_speed_bound():
    w = spawn(sample_config(17))
    dt = 1.0 / SIM_FREQUENCY
    for a in [0, 3, 3, 2, 1, 4, 0] * 3:
        w2, _, done, _ = step(w, a)
        dx = np.abs(traffic._ring_dx(w2.x % 1000, w.x % 1000, 1000.0))
        assert np.all(dx <= (60.0 + 10.0 * dt) * dt * SIM_FREQUENCY)
        assert np.all(np.abs(w2.vy) <= w2.lane_width / LANE_CHANGE_DURATION + 1e-9)
        assert np.all(w2.vx >= 0)
        w = w2
        if done:
            break


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 500), st.integers(1, 10), st.integers(1, 10))
def test_overlap_symmetric(seed, i, j):
    w = spawn(sample_config(seed))
    i, j = i % w.n, j % w.n
    assert overlaps(w, i, j) == overlaps(w, j, i)


def test_background_stability_long_run():
    c = ScenarioConfig("stable", 6, 6, 12, 4, 20, density=15.0, lane_count=3, seed=0)
    w = spawn(c)
    for k in range(10_000):
        w, _, _, info = step(w, Action.SLOWER if k == 0 else Action.IDLE, max_steps=10**9)
        assert not info.crashed
        if k % 10 == 0:
            assert not background_collisions(w)
    assert not background_collisions(w)


def test_reward_terms():
    w = spawn(empty_config())
    w = w.copy(vx=np.array([25.0]))
    assert reward_for(w, False, False) == pytest.approx(0.3)
    assert reward_for(w, False, True) == pytest.approx(0.25)
    assert reward_for(w, True, False) == -1.0
    assert reward_for(w.copy(vx=np.array([45.0])), False, False) == pytest.approx(0.6)


def test_trace_round_trip():
    res = run_episode(sample_config(3), scripted([3, 3]), max_steps=3, record_trace=True)
    buf = io.StringIO()
    write_trace(res.trace, buf)
    buf.seek(0)
    recs = read_trace(buf)
    assert len(recs) == len(res.trace) == res.length + 1
    assert list(recs[0]) == ["time", "vehicles"]
    assert [v["id"] for v in recs[1]["vehicles"]] == sorted(v["id"] for v in recs[1]["vehicles"])
    assert list(recs[0]["vehicles"][0])[:3] == ["id", "x", "lane"]
