"""A minimal multi-lane highway simulator.

Background vehicles follow the Intelligent Driver Model longitudinally and
decide lane changes with MOBIL once per policy step. The ego vehicle takes
one of five meta-actions per policy step, tracked by simple speed and lane
controllers. Background traffic lives on a ring of ``road_length`` metres;
the ego does not wrap and its episode ends when it reaches the road end.

World states are columnar: every per-vehicle quantity is an array whose
index 0 is the ego.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from enum import IntEnum
from typing import IO, Callable, NamedTuple, Sequence

import numpy as np

from . import _kernels as _k
from ._kernels import (
    EGO_MAX_ACCEL,
    EGO_MAX_BRAKE,
    EGO_SPEED_GAIN,
    IDM_DELTA,
    IDM_MIN_GAP,
    MAX_BRAKING,
    MOBIL_SAFE_BRAKING,
)
from .risk import Leader, Neighbor, RiskParams, RiskReport, StepRisk, pair_risk
from .scenario import (
    BEHAVIORS,
    KINDS,
    VEHICLE_LENGTH,
    VEHICLE_WIDTH,
    ScenarioConfig,
    behavior_params,
    validate_config,
)


class Action(IntEnum):
    LANE_LEFT = 0
    IDLE = 1
    LANE_RIGHT = 2
    FASTER = 3
    SLOWER = 4


N_ACTIONS = len(Action)

ROAD_LENGTH = 1000.0
LANE_WIDTH = 4.0
LANE_CHANGE_DURATION = 1.0
SIM_FREQUENCY = 15
POLICY_FREQUENCY = 1
MAX_EPISODE_STEPS = 120

EGO_ID = 0
EGO_INIT_SPEED = 20.0
EGO_SPEED_STEP = 5.0
EGO_MIN_SPEED = 10.0
EGO_MAX_SPEED = 40.0
SPAWN_MIN_GAP = 6.0  # bumper-to-bumper [m]
EGO_CLEAR_BEHIND = 15.0  # free road kept around the ego's spawn point [m]
EGO_CLEAR_AHEAD = 40.0

REWARD_SPEED_RANGE = (20.0, 30.0)
REWARD_SPEED_WEIGHT = 0.6
REWARD_CRASH = -1.0
REWARD_LANE_CHANGE = -0.05

OBS_NEIGHBORS = 5
OBS_DX_SCALE = 100.0
OBS_SPEED_SCALE = 30.0
EGO_FEATURES = 8
NEIGHBOR_FEATURES = 5
OBS_SIZE = EGO_FEATURES + OBS_NEIGHBORS * NEIGHBOR_FEATURES

EGO_CLASS = -1


class SpawnError(RuntimeError):
    """The configured vehicles cannot be placed on the road."""


@dataclass(frozen=True)
class VehicleState:
    id: int
    x: float
    lane: int
    y: float
    vx: float
    vy: float
    ax: float
    behavior_class: str
    kind: str
    length: float
    width: float
    target_lane: int
    target_speed: float


_ARRAY_FIELDS = (
    "ids", "x", "y", "vx", "vy", "ax", "lane", "target_lane", "target_speed",
    "behavior", "kind", "length", "width",
    "v0", "headway", "accel", "decel", "politeness", "lc_threshold",
)


@dataclass(frozen=True, eq=False)
class WorldState:
    time: float
    lane_count: int
    lane_width: float
    road_length: float
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    ax: np.ndarray
    lane: np.ndarray
    target_lane: np.ndarray
    target_speed: np.ndarray
    behavior: np.ndarray  # index into BEHAVIORS, EGO_CLASS for the ego
    kind: np.ndarray  # index into KINDS
    length: np.ndarray
    width: np.ndarray
    v0: np.ndarray
    headway: np.ndarray
    accel: np.ndarray
    decel: np.ndarray
    politeness: np.ndarray
    lc_threshold: np.ndarray
    steps: int = 0

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        scalars = ("time", "lane_count", "lane_width", "road_length", "steps")
        if any(getattr(self, s) != getattr(other, s) for s in scalars):
            return False
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _ARRAY_FIELDS)

    __hash__ = None

    @property
    def n(self) -> int:
        return len(self.ids)

    def vehicle(self, i: int) -> VehicleState:
        b = int(self.behavior[i])
        return VehicleState(
            id=int(self.ids[i]),
            x=float(self.x[i]),
            lane=int(self.lane[i]),
            y=float(self.y[i]),
            vx=float(self.vx[i]),
            vy=float(self.vy[i]),
            ax=float(self.ax[i]),
            behavior_class="ego" if b == EGO_CLASS else BEHAVIORS[b],
            kind=KINDS[int(self.kind[i])],
            length=float(self.length[i]),
            width=float(self.width[i]),
            target_lane=int(self.target_lane[i]),
            target_speed=float(self.target_speed[i]),
        )

    @property
    def ego(self) -> VehicleState:
        return self.vehicle(0)

    @property
    def others(self) -> list[VehicleState]:
        return [self.vehicle(i) for i in range(1, self.n)]

    def copy(self, **changes) -> WorldState:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in _ARRAY_FIELDS:
            values[name] = values[name].copy()
        values.update(changes)
        return WorldState(**values)

    def to_record(self) -> dict:
        """One trace line: time, then vehicles sorted by id."""
        order = np.argsort(self.ids, kind="stable")
        vehicles = []
        for i in order:
            v = self.vehicle(int(i))
            vehicles.append({f.name: getattr(v, f.name) for f in fields(v)})
        return {"time": self.time, "vehicles": vehicles}


class RiskStepInfo(NamedTuple):
    risk: StepRisk
    crashed: bool
    lane_changed: bool
    truncated: bool


@dataclass
class EpisodeResult:
    total_reward: float
    length: int
    crashed: bool
    risk: RiskReport
    trace: list[WorldState] | None = field(default=None, repr=False)


# ---------------------------------------------------------------- helpers


def _ring_dx(x_other, x_ref, road_length):
    return np.mod(x_other - x_ref + 0.5 * road_length, road_length) - 0.5 * road_length


def idm_acceleration(v, v0, headway, accel, decel, gap=None, v_lead=0.0) -> float:
    """Intelligent Driver Model acceleration; ``gap=None`` means free road."""
    return _k.idm(v, v0, headway, accel, decel, gap is not None, 0.0 if gap is None else gap, v_lead)


def current_lane(y: np.ndarray, lane_width: float, lane_count: int) -> np.ndarray:
    return np.clip(np.rint(y / lane_width), 0, lane_count - 1).astype(np.int64)


def _columns(world: WorldState):
    return (world.x, world.y, world.vx, world.vy, world.ax, world.lane, world.target_lane,
            world.target_speed, world.length, world.width, world.v0, world.headway,
            world.accel, world.decel)


# ---------------------------------------------------------------- spawning


def spawn(config: ScenarioConfig, seed: int | None = None) -> WorldState:
    """Place the ego and the configured background traffic on the road.

    ``seed`` overrides ``config.seed``. Vehicles of a critical pair are placed
    exactly as seeded; the rest fill a road segment whose per-lane spacing
    follows the configured density, never closer than a minimum gap.
    """
    validate_config(config)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    L, w, nl = ROAD_LENGTH, LANE_WIDTH, config.lane_count

    behaviors = [b for b, n in config.behavior_counts().items() for _ in range(n)]
    kinds = [k for k, n in config.kind_counts().items() for _ in range(n)]
    placed = []  # (x, lane, speed, accel, behavior, kind)
    ego_lane = int(rng.integers(nl))
    if config.critical_pair is not None:
        ego_lane = config.critical_pair[0].lane_index
        for s in config.critical_pair:
            behaviors.remove(s.behavior_class)
            kinds.remove(s.kind)
            placed.append((s.longitudinal_position % L, s.lane_index, s.speed, s.acceleration,
                           s.behavior_class, s.kind))
    behaviors = [behaviors[i] for i in rng.permutation(len(behaviors))]
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]

    occupied = [[] for _ in range(nl)]  # (x, length) per lane
    # generated traffic keeps clear of the ego; seeded pair vehicles may not
    occupied[ego_lane].append((0.5 * (EGO_CLEAR_AHEAD - EGO_CLEAR_BEHIND), EGO_CLEAR_AHEAD + EGO_CLEAR_BEHIND))
    for x, lane, *_rest, kind in placed:
        occupied[lane].append((x, VEHICLE_LENGTH[kind]))

    n_rest = len(behaviors)
    per_lane = [n_rest // nl + (1 if i < n_rest % nl else 0) for i in range(nl)]
    # sparse densities with many vehicles would need more than one lap
    spacing = min(1000.0 / config.density, L / max(max(per_lane), 1))
    lane_of = []
    for lane, count in enumerate(per_lane):
        lane_of.extend([lane] * count)
    lane_of = [lane_of[i] for i in rng.permutation(len(lane_of))]

    cursor = {}
    for lane in range(nl):
        segment = spacing * per_lane[lane]
        cursor[lane] = (-segment / 3.0 + rng.uniform(0, spacing)) % L
    new = []
    for behavior, kind, lane in zip(behaviors, kinds, lane_of):
        length = VEHICLE_LENGTH[kind]
        pos, probed = cursor[lane], 0.0
        while not _free(pos, length, occupied[lane], L):
            pos = (pos + 1.0) % L
            probed += 1.0
            if probed > L:
                raise SpawnError(
                    f"cannot fit {config.num_vehicles} vehicles in {nl} lanes of {L:.0f} m "
                    f"(config {config.id})"
                )
        occupied[lane].append((pos, length))
        new.append((pos, lane, None, 0.0, behavior, kind))
        cursor[lane] = (pos + spacing) % L

    rows = [(0.0, ego_lane, EGO_INIT_SPEED, 0.0, None, "car")] + placed + new
    world = _build_world(rows, nl)
    # keep free-flow speeds below what the initial gaps allow
    speeds = world.vx.copy()
    unset = np.array([r[2] is None for r in rows])
    desire = world.v0 * rng.uniform(0.85, 1.0, size=world.n)
    speeds[unset] = desire[unset]
    xm = np.mod(world.x, L)
    leader, _ = _k.leaders(xm, world.lane, world.ids, L)
    gap = np.array([
        _k.gap_between(i, j, xm, world.length, L) if j >= 0 else np.inf for i, j in enumerate(leader)
    ])
    cap = np.maximum(0.0, (gap - IDM_MIN_GAP) / np.maximum(world.headway, 0.1))
    speeds[unset] = np.minimum(speeds[unset], cap[unset])
    world.vx[:] = speeds
    world.target_speed[0] = EGO_INIT_SPEED
    return world


def _free(pos, length, occupied, L) -> bool:
    for x, other in occupied:
        d = abs(float(_ring_dx(pos, x, L)))
        if d < 0.5 * (length + other) + SPAWN_MIN_GAP:
            return False
    return True


def _build_world(rows, lane_count: int) -> WorldState:
    n = len(rows)
    arr = {name: np.zeros(n) for name in
           ("x", "y", "vx", "vy", "ax", "target_speed", "length", "width",
            "v0", "headway", "accel", "decel", "politeness", "lc_threshold")}
    lane = np.zeros(n, dtype=np.int64)
    behavior = np.zeros(n, dtype=np.int64)
    kind = np.zeros(n, dtype=np.int64)
    for i, (x, ln, speed, acc, b, k) in enumerate(rows):
        params = behavior_params(b or "regular", k)
        arr["x"][i] = x
        arr["y"][i] = ln * LANE_WIDTH
        arr["vx"][i] = 0.0 if speed is None else speed
        arr["ax"][i] = acc
        arr["length"][i] = VEHICLE_LENGTH[k]
        arr["width"][i] = VEHICLE_WIDTH[k]
        arr["v0"][i] = params.desired_speed
        arr["headway"][i] = params.desired_time_headway
        arr["accel"][i] = params.max_acceleration
        arr["decel"][i] = params.comfortable_deceleration
        arr["politeness"][i] = params.politeness
        arr["lc_threshold"][i] = params.lane_change_threshold
        arr["target_speed"][i] = params.desired_speed
        lane[i] = ln
        behavior[i] = EGO_CLASS if b is None else BEHAVIORS.index(b)
        kind[i] = KINDS.index(k)
    return WorldState(
        time=0.0,
        lane_count=lane_count,
        lane_width=LANE_WIDTH,
        road_length=ROAD_LENGTH,
        ids=np.arange(n, dtype=np.int64),
        lane=lane,
        target_lane=lane.copy(),
        behavior=behavior,
        kind=kind,
        **arr,
    )


# ---------------------------------------------------------------- dynamics


def _apply_action(world: WorldState, action: int) -> bool:
    """Update the ego's targets in place; returns True when a lane change starts."""
    target = int(world.target_lane[0])
    if action == Action.LANE_LEFT:
        new = max(target - 1, 0)
    elif action == Action.LANE_RIGHT:
        new = min(target + 1, world.lane_count - 1)
    else:
        new = target
        if action == Action.FASTER:
            world.target_speed[0] = min(world.target_speed[0] + EGO_SPEED_STEP, EGO_MAX_SPEED)
        elif action == Action.SLOWER:
            world.target_speed[0] = max(world.target_speed[0] - EGO_SPEED_STEP, EGO_MIN_SPEED)
    world.target_lane[0] = new
    return new != target


def overlaps(world: WorldState, i: int, j: int) -> bool:
    """Axis-aligned rectangle overlap between vehicles ``i`` and ``j``."""
    dx = abs(float(_ring_dx(world.x[j] % world.road_length, world.x[i] % world.road_length, world.road_length)))
    dy = abs(float(world.y[j] - world.y[i]))
    return dx < 0.5 * (world.length[i] + world.length[j]) and dy < 0.5 * (world.width[i] + world.width[j])


def background_collisions(world: WorldState) -> list[tuple[int, int]]:
    """All overlapping pairs of background vehicles."""
    xm = world.x % world.road_length
    out = []
    for i in range(1, world.n):
        dx = np.abs(_ring_dx(xm[i + 1:], xm[i], world.road_length))
        dy = np.abs(world.y[i + 1:] - world.y[i])
        hit = (dx < 0.5 * (world.length[i] + world.length[i + 1:])) & (dy < 0.5 * (world.width[i] + world.width[i + 1:]))
        out.extend((int(world.ids[i]), int(world.ids[i + 1 + k])) for k in np.flatnonzero(hit))
    return out


def _partner_record(rec: np.ndarray) -> tuple[Leader | None, Neighbor | None]:
    lead = None
    if rec[_k.P_HAS_LEAD]:
        lead = Leader(float(rec[_k.P_GAP]), float(rec[_k.P_V_EGO]), float(rec[_k.P_V_LEAD]))
    nln = None
    if rec[_k.P_HAS_NLN]:
        nln = Neighbor(float(rec[_k.P_D_LAT]), float(rec[_k.P_VLAT_EGO]), float(rec[_k.P_VLAT_NLN]))
    return lead, nln


def ego_partners(world: WorldState) -> tuple[Leader | None, Neighbor | None]:
    """The ego's same-lane leader and its nearest vehicle in an adjacent lane."""
    rec = np.zeros(_k.PARTNER_FIELDS)
    _k.partners(world.x, world.y, world.vx, world.vy, world.lane, world.width, world.length,
                world.ids, world.road_length, rec)
    return _partner_record(rec)


def reward_for(world: WorldState, crashed: bool, lane_changed: bool) -> float:
    if crashed:
        return REWARD_CRASH
    lo, hi = REWARD_SPEED_RANGE
    speed_term = min(max((world.vx[0] - lo) / (hi - lo), 0.0), 1.0)
    return REWARD_SPEED_WEIGHT * speed_term + (REWARD_LANE_CHANGE if lane_changed else 0.0)


def step(
    world: WorldState,
    ego_action: int,
    params: RiskParams = RiskParams(),
    max_steps: int = MAX_EPISODE_STEPS,
) -> tuple[WorldState, float, bool, RiskStepInfo]:
    """Advance one policy step (``SIM_FREQUENCY / POLICY_FREQUENCY`` substeps)."""
    if ego_action not in range(N_ACTIONS):
        raise ValueError(f"unknown action {ego_action!r}")
    new = world.copy()
    lane_changed = _apply_action(new, int(ego_action))
    _k.mobil(new.x, new.y, new.vx, new.lane, new.target_lane, new.length, new.v0, new.headway,
             new.accel, new.decel, new.politeness, new.lc_threshold, new.ids, new.lane_count,
             new.lane_width, new.road_length)
    n_sub = SIM_FREQUENCY // POLICY_FREQUENCY
    log = np.zeros((n_sub, _k.PARTNER_FIELDS))
    crashed, ran = _k.advance(*_columns(new), new.ids, new.lane_count, new.lane_width,
                              new.road_length, n_sub, 1.0 / SIM_FREQUENCY, LANE_CHANGE_DURATION, log)
    risk = StepRisk()
    for rec in log[:ran]:
        risk = risk.merge(pair_risk(*_partner_record(rec), params))
    time = world.time + ran / SIM_FREQUENCY
    new = new.copy(time=time, steps=world.steps + 1)
    off_road = new.x[0] >= new.road_length
    truncated = (not crashed) and (off_road or new.steps >= max_steps)
    reward = reward_for(new, crashed, lane_changed)
    done = crashed or truncated
    return new, reward, done, RiskStepInfo(risk, crashed, lane_changed, truncated)


# ---------------------------------------------------------------- observation


def observe(world: WorldState) -> np.ndarray:
    """Fixed-length ego-centric feature vector in [-1, 1]."""
    obs = np.zeros(OBS_SIZE)
    L, w = world.road_length, world.lane_width
    span = w * max(world.lane_count - 1, 1)
    obs[0] = 1.0
    obs[1] = 2.0 * world.x[0] / L - 1.0
    obs[2] = 2.0 * world.y[0] / span - 1.0
    obs[3] = (world.vx[0] - OBS_SPEED_SCALE) / OBS_SPEED_SCALE
    obs[4] = world.vy[0] / (w / LANE_CHANGE_DURATION)
    obs[5] = (world.target_speed[0] - OBS_SPEED_SCALE) / OBS_SPEED_SCALE
    obs[6] = float(world.target_lane[0] > 0)
    obs[7] = float(world.target_lane[0] < world.lane_count - 1)
    if world.n > 1:
        xm = np.mod(world.x, L)
        dx = _ring_dx(xm[1:], xm[0], L)
        order = np.lexsort((world.ids[1:], np.abs(dx)))[:OBS_NEIGHBORS]
        for slot, k in enumerate(order):
            i = k + 1
            base = EGO_FEATURES + slot * NEIGHBOR_FEATURES
            obs[base:base + NEIGHBOR_FEATURES] = (
                1.0,
                dx[k] / OBS_DX_SCALE,
                (world.y[i] - world.y[0]) / (2 * w),
                (world.vx[i] - world.vx[0]) / OBS_SPEED_SCALE,
                (world.vy[i] - world.vy[0]) / OBS_SPEED_SCALE,
            )
    return np.clip(obs, -1.0, 1.0)


# ---------------------------------------------------------------- episodes


class HighwayEnv:
    """Stateful wrapper around :func:`spawn` and :func:`step` with risk accounting."""

    def __init__(self, risk_params: RiskParams = RiskParams(), max_steps: int = MAX_EPISODE_STEPS,
                 record_trace: bool = False):
        self.risk_params = risk_params
        self.max_steps = max_steps
        self.record_trace = record_trace
        self.world: WorldState | None = None

    def reset(self, config: ScenarioConfig, seed: int | None = None) -> np.ndarray:
        self.config = config
        self.world = spawn(config, seed)
        self.report = RiskReport()
        self.total_reward = 0.0
        self.trace = [self.world] if self.record_trace else None
        return observe(self.world)

    def step(self, action: int) -> tuple[np.ndarray, float, bool, RiskStepInfo]:
        self.world, reward, done, info = step(self.world, action, self.risk_params, self.max_steps)
        self.report = self.report.update(info.risk, self.risk_params)
        if info.crashed:
            self.report = self.report.with_crash()
        self.total_reward += reward
        if self.trace is not None:
            self.trace.append(self.world)
        return observe(self.world), reward, done, info

    def result(self) -> EpisodeResult:
        return EpisodeResult(
            total_reward=self.total_reward,
            length=self.world.steps,
            crashed=self.report.crashed,
            risk=self.report,
            trace=self.trace,
        )


def run_episode(
    config: ScenarioConfig,
    policy: Callable[[np.ndarray], int],
    max_steps: int = MAX_EPISODE_STEPS,
    seed: int | None = None,
    risk_params: RiskParams = RiskParams(),
    record_trace: bool = False,
) -> EpisodeResult:
    env = HighwayEnv(risk_params, max_steps, record_trace)
    obs = env.reset(config, seed)
    done = False
    while not done:
        obs, _, done, _ = env.step(int(policy(obs)))
    return env.result()


def write_trace(trace: Sequence[WorldState], fp: IO[str]) -> None:
    """Write one JSON record per world state."""
    for world in trace:
        fp.write(json.dumps(world.to_record()) + "\n")


def read_trace(fp: IO[str]) -> list[dict]:
    return [json.loads(line) for line in fp if line.strip()]


def scripted(actions: Sequence[int], default: int = Action.IDLE) -> Callable[[np.ndarray], int]:
    """A policy replaying a fixed action sequence, then ``default``."""
    it = iter(actions)
    return lambda obs: next(it, default)

