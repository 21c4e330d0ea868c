"""Scenario configurations, behavior classes and the scenario database.

A :class:`ScenarioConfig` describes one highway traffic setup: how many
background vehicles of each behavior class and vehicle kind, the traffic
density, the lane count, and optionally a pair of seeded vehicles taken from
a risky real-world interaction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

BEHAVIORS = ("aggressive", "defensive", "regular")
KINDS = ("car", "truck")

# canonical serialized order; lane_count and seed follow the identifier
CONFIG_KEYS = (
    "num_aggressive",
    "num_defensive",
    "num_regular",
    "num_trucks",
    "num_cars",
    "density",
    "id",
    "lane_count",
    "seed",
    "vehicle_i",
    "vehicle_j",
)
VEHICLE_KEYS = ("x", "lane", "speed", "acceleration", "behavior", "kind")
COUNT_FIELDS = ("num_aggressive", "num_defensive", "num_regular", "num_trucks", "num_cars")


class ValidationError(ValueError):
    """A value violates a ScenarioConfig invariant or a valid range."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DatabaseError(ValueError):
    """A record in a scenario database file is malformed."""

    def __init__(self, index: int, field: str, message: str):
        super().__init__(f"record {index}, field {field!r}: {message}")
        self.index = index
        self.field = field


class ConfigurationError(ValueError):
    """A valid-range table cannot produce any valid configuration."""


@dataclass(frozen=True)
class BehaviorParams:
    politeness: float
    desired_time_headway: float
    max_acceleration: float
    comfortable_deceleration: float
    desired_speed: float
    lane_change_threshold: float


BEHAVIOR_PARAMS = {
    "aggressive": BehaviorParams(0.0, 0.8, 4.0, 2.5, 33.0, 0.1),
    "regular": BehaviorParams(0.3, 1.5, 3.0, 2.0, 28.0, 0.2),
    "defensive": BehaviorParams(0.7, 2.5, 2.0, 1.5, 23.0, 0.4),
}
TRUCK_MAX_SPEED = 25.0
VEHICLE_LENGTH = {"car": 5.0, "truck": 12.0}
VEHICLE_WIDTH = {"car": 2.0, "truck": 2.5}


def behavior_params(behavior: str, kind: str = "car") -> BehaviorParams:
    """Driving parameters of a behavior class; trucks get a capped desired speed."""
    params = BEHAVIOR_PARAMS[behavior]
    if kind == "truck":
        params = replace(params, desired_speed=min(params.desired_speed, TRUCK_MAX_SPEED))
    return params


@dataclass(frozen=True)
class ValidRanges:
    """Inclusive bounds for every numeric configuration field.

    ``density`` excludes its lower bound.
    """

    num_aggressive: tuple[int, int] = (0, 30)
    num_defensive: tuple[int, int] = (0, 30)
    num_regular: tuple[int, int] = (0, 30)
    num_trucks: tuple[int, int] = (0, 30)
    num_cars: tuple[int, int] = (0, 30)
    density: tuple[float, float] = (0.0, 60.0)
    lane_count: tuple[int, int] = (2, 4)
    x: tuple[float, float] = (0.0, 1000.0)
    speed: tuple[float, float] = (0.0, 60.0)
    acceleration: tuple[float, float] = (-10.0, 10.0)

    def width(self, name: str) -> float:
        lo, hi = getattr(self, name)
        return float(hi - lo)

    def as_table(self) -> dict[str, tuple[float, float]]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


DEFAULT_RANGES = ValidRanges()


@dataclass(frozen=True)
class VehicleSeed:
    longitudinal_position: float
    lane_index: int
    speed: float
    acceleration: float = 0.0
    behavior_class: str = "regular"
    kind: str = "car"

    def to_dict(self) -> dict[str, Any]:
        return {
            "x": self.longitudinal_position,
            "lane": self.lane_index,
            "speed": self.speed,
            "acceleration": self.acceleration,
            "behavior": self.behavior_class,
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> VehicleSeed:
        missing = [k for k in VEHICLE_KEYS if k not in data]
        if missing:
            raise KeyError(missing[0])
        return cls(
            longitudinal_position=_as_float(data["x"], "x"),
            lane_index=_as_int(data["lane"], "lane"),
            speed=_as_float(data["speed"], "speed"),
            acceleration=_as_float(data["acceleration"], "acceleration"),
            behavior_class=str(data["behavior"]),
            kind=str(data["kind"]),
        )


@dataclass(frozen=True)
class ScenarioConfig:
    id: str
    num_aggressive: int
    num_defensive: int
    num_regular: int
    num_trucks: int
    num_cars: int
    density: float
    lane_count: int = 3
    seed: int = 0
    critical_pair: tuple[VehicleSeed, VehicleSeed] | None = None

    @property
    def num_vehicles(self) -> int:
        return self.num_trucks + self.num_cars

    def behavior_counts(self) -> dict[str, int]:
        return {
            "aggressive": self.num_aggressive,
            "defensive": self.num_defensive,
            "regular": self.num_regular,
        }

    def kind_counts(self) -> dict[str, int]:
        return {"car": self.num_cars, "truck": self.num_trucks}

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "num_aggressive": self.num_aggressive,
            "num_defensive": self.num_defensive,
            "num_regular": self.num_regular,
            "num_trucks": self.num_trucks,
            "num_cars": self.num_cars,
            "density": self.density,
            "id": self.id,
            "lane_count": self.lane_count,
            "seed": self.seed,
        }
        if self.critical_pair is not None:
            data["vehicle_i"] = self.critical_pair[0].to_dict()
            data["vehicle_j"] = self.critical_pair[1].to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScenarioConfig:
        """Build a config from its serialized form without validating it."""
        required = [k for k in CONFIG_KEYS if k not in ("vehicle_i", "vehicle_j")]
        for key in required:
            if key not in data:
                raise KeyError(key)
        pair = None
        if ("vehicle_i" in data) != ("vehicle_j" in data):
            raise KeyError("vehicle_j" if "vehicle_i" in data else "vehicle_i")
        if "vehicle_i" in data:
            seeds = []
            for key in ("vehicle_i", "vehicle_j"):
                if not isinstance(data[key], dict):
                    raise TypeError(f"{key} must be an object")
                try:
                    seeds.append(VehicleSeed.from_dict(data[key]))
                except KeyError as exc:
                    raise KeyError(f"{key}.{exc.args[0]}") from None
            pair = (seeds[0], seeds[1])
        return cls(
            id=str(data["id"]),
            num_aggressive=_as_int(data["num_aggressive"], "num_aggressive"),
            num_defensive=_as_int(data["num_defensive"], "num_defensive"),
            num_regular=_as_int(data["num_regular"], "num_regular"),
            num_trucks=_as_int(data["num_trucks"], "num_trucks"),
            num_cars=_as_int(data["num_cars"], "num_cars"),
            density=_as_float(data["density"], "density"),
            lane_count=_as_int(data["lane_count"], "lane_count"),
            seed=_as_int(data["seed"], "seed"),
            critical_pair=pair,
        )

    def content_key(self) -> tuple:
        """Everything except the identifier, for duplicate detection."""
        d = self.to_dict()
        d.pop("id")
        return tuple(sorted((k, json.dumps(v, sort_keys=True)) for k, v in d.items()))


def _as_int(value: Any, name: str) -> int:
    if isinstance(value, bool):
        raise TypeError(f"{name} must be an integer")
    if isinstance(value, float):
        if not value.is_integer():
            raise TypeError(f"{name} must be an integer, got {value}")
        return int(value)
    if not isinstance(value, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    return int(value)


def _as_float(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
        raise TypeError(f"{name} must be a number, got {type(value).__name__}")
    value = float(value)
    if not math.isfinite(value):
        raise TypeError(f"{name} must be finite")
    return value


def _check_range(name: str, value: float, bounds: tuple[float, float], open_low: bool = False):
    lo, hi = bounds
    below = value <= lo if open_low else value < lo
    if below or value > hi:
        left = "(" if open_low else "["
        raise ValidationError(name, f"{value} outside {left}{lo}, {hi}]")


def validate_config(config: ScenarioConfig, ranges: ValidRanges = DEFAULT_RANGES) -> ScenarioConfig:
    """Raise :class:`ValidationError` unless every invariant holds."""
    if not config.id:
        raise ValidationError("id", "must be a non-empty string")
    for name in COUNT_FIELDS:
        _check_range(name, getattr(config, name), getattr(ranges, name))
    _check_range("density", config.density, ranges.density, open_low=True)
    _check_range("lane_count", config.lane_count, ranges.lane_count)
    if config.seed < 0:
        raise ValidationError("seed", "must be non-negative")
    behavior_total = config.num_aggressive + config.num_defensive + config.num_regular
    if behavior_total != config.num_vehicles:
        raise ValidationError(
            "num_cars",
            f"behavior counts sum to {behavior_total} but trucks + cars = {config.num_vehicles}",
        )
    if config.critical_pair is not None:
        if config.num_vehicles < 2:
            raise ValidationError("vehicle_i", "a critical pair needs at least two vehicles")
        for key, seed in zip(("vehicle_i", "vehicle_j"), config.critical_pair):
            _validate_seed(key, seed, config.lane_count, ranges)
        used_b = _tally(s.behavior_class for s in config.critical_pair)
        for behavior, n in used_b.items():
            if n > config.behavior_counts()[behavior]:
                raise ValidationError("vehicle_i", f"pair uses more {behavior} vehicles than configured")
        used_k = _tally(s.kind for s in config.critical_pair)
        for kind, n in used_k.items():
            if n > config.kind_counts()[kind]:
                raise ValidationError("vehicle_i", f"pair uses more {kind}s than configured")
    return config


def _validate_seed(key: str, seed: VehicleSeed, lane_count: int, ranges: ValidRanges):
    _check_range(f"{key}.x", seed.longitudinal_position, ranges.x)
    _check_range(f"{key}.speed", seed.speed, ranges.speed)
    _check_range(f"{key}.acceleration", seed.acceleration, ranges.acceleration)
    if not 0 <= seed.lane_index < lane_count:
        raise ValidationError(f"{key}.lane", f"{seed.lane_index} outside [0, {lane_count - 1}]")
    if seed.behavior_class not in BEHAVIORS:
        raise ValidationError(f"{key}.behavior", f"unknown behavior {seed.behavior_class!r}")
    if seed.kind not in KINDS:
        raise ValidationError(f"{key}.kind", f"unknown kind {seed.kind!r}")


def _tally(items: Iterable[str]) -> dict[str, int]:
    out: dict[str, int] = {}
    for item in items:
        out[item] = out.get(item, 0) + 1
    return out


def split_kinds(total: int, truck_share: float, ranges: ValidRanges = DEFAULT_RANGES) -> tuple[int, int]:
    """Split ``total`` vehicles into (trucks, cars) proportionally, inside the ranges."""
    trucks = int(round(total * truck_share))
    lo = max(ranges.num_trucks[0], total - ranges.num_cars[1])
    hi = min(ranges.num_trucks[1], total - ranges.num_cars[0])
    if lo > hi:
        raise ValidationError("num_trucks", f"no truck/car split of {total} vehicles fits the ranges")
    trucks = min(max(trucks, lo), hi)
    return trucks, total - trucks


def reconcile(config: ScenarioConfig, ranges: ValidRanges = DEFAULT_RANGES) -> ScenarioConfig:
    """Restore the partition invariant, treating behavior counts as authoritative.

    The truck/car split is rescaled proportionally to the behavior total, and
    a critical pair whose classes are not covered by the counts is relabeled
    to the most common class.
    """
    total = config.num_aggressive + config.num_defensive + config.num_regular
    share = config.num_trucks / config.num_vehicles if config.num_vehicles else 0.0
    trucks, cars = split_kinds(total, share, ranges)
    config = replace(config, num_trucks=trucks, num_cars=cars)
    if config.critical_pair is not None:
        if total < 2:
            return replace(config, critical_pair=None)
        config = replace(config, critical_pair=_fit_pair(config))
    return config


def _fit_pair(config: ScenarioConfig) -> tuple[VehicleSeed, VehicleSeed]:
    b_left = config.behavior_counts()
    k_left = config.kind_counts()
    fitted = []
    lane_max = config.lane_count - 1
    for seed in config.critical_pair:
        behavior = seed.behavior_class
        if b_left.get(behavior, 0) <= 0:
            behavior = max(BEHAVIORS, key=lambda b: (b_left[b], b))
        kind = seed.kind
        if k_left.get(kind, 0) <= 0:
            kind = max(KINDS, key=lambda k: (k_left[k], k))
        b_left[behavior] -= 1
        k_left[kind] -= 1
        fitted.append(
            replace(seed, behavior_class=behavior, kind=kind, lane_index=min(seed.lane_index, lane_max))
        )
    return fitted[0], fitted[1]


def serialize_database(configs: Iterable[ScenarioConfig]) -> str:
    return json.dumps([c.to_dict() for c in configs], indent=2) + "\n"


def save_database(configs: Iterable[ScenarioConfig], path: str | Path) -> None:
    Path(path).write_text(serialize_database(configs))


def parse_database(text: str, ranges: ValidRanges = DEFAULT_RANGES) -> list[ScenarioConfig]:
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatabaseError(-1, "<document>", f"not valid JSON ({exc})") from None
    if not isinstance(records, list):
        raise DatabaseError(-1, "<document>", "top level must be an array")
    configs = []
    for index, record in enumerate(records):
        if not isinstance(record, dict):
            raise DatabaseError(index, "<record>", "must be an object")
        try:
            config = ScenarioConfig.from_dict(record)
        except KeyError as exc:
            raise DatabaseError(index, str(exc.args[0]), "missing") from None
        except TypeError as exc:
            name = str(exc).split(" ", 1)[0]
            raise DatabaseError(index, name, str(exc)) from None
        try:
            validate_config(config, ranges)
        except ValidationError as exc:
            raise ValidationError(exc.field, f"record {index}: {exc}") from None
        configs.append(config)
    return configs


def load_database(path: str | Path, ranges: ValidRanges = DEFAULT_RANGES) -> list[ScenarioConfig]:
    """Load and validate every configuration in a database file, in file order."""
    return parse_database(Path(path).read_text(), ranges)


def _check_feasible(ranges: ValidRanges):
    b_lo = ranges.num_aggressive[0] + ranges.num_defensive[0] + ranges.num_regular[0]
    b_hi = ranges.num_aggressive[1] + ranges.num_defensive[1] + ranges.num_regular[1]
    k_lo = ranges.num_trucks[0] + ranges.num_cars[0]
    k_hi = ranges.num_trucks[1] + ranges.num_cars[1]
    for name in COUNT_FIELDS + ("density", "lane_count"):
        lo, hi = getattr(ranges, name)
        if lo > hi:
            raise ConfigurationError(f"{name}: empty range [{lo}, {hi}]")
    if max(b_lo, k_lo) > min(b_hi, k_hi):
        raise ConfigurationError("behavior and kind count ranges admit no common total")
    if min(b_hi, k_hi) == 0 and ranges.density[0] > 0:
        raise ConfigurationError("ranges allow no vehicles but require a positive minimum density")
    if ranges.density[1] <= max(ranges.density[0], 0):
        raise ConfigurationError("density range must contain a positive value")
    if ranges.lane_count[0] < 2:
        raise ConfigurationError("lane_count minimum must be at least 2")


def _fresh_id(rng: np.random.Generator, prefix: str = "cfg") -> str:
    return f"{prefix}-{int(rng.integers(0, 2**48)):012x}"


def sample_config(rng_seed: int, ranges: ValidRanges = DEFAULT_RANGES) -> ScenarioConfig:
    """Draw a random valid configuration; identical seeds give identical configs."""
    _check_feasible(ranges)
    rng = np.random.default_rng(rng_seed)
    k_lo = ranges.num_trucks[0] + ranges.num_cars[0]
    k_hi = ranges.num_trucks[1] + ranges.num_cars[1]
    for _ in range(1000):
        counts = [int(rng.integers(lo, hi + 1)) for lo, hi in
                  (ranges.num_aggressive, ranges.num_defensive, ranges.num_regular)]
        total = sum(counts)
        if k_lo <= total <= k_hi:
            break
    else:
        # fall back to the smallest feasible total
        total = max(k_lo, sum(r[0] for r in (ranges.num_aggressive, ranges.num_defensive, ranges.num_regular)))
        counts = _fill_counts(total, ranges)
    t_lo = max(ranges.num_trucks[0], total - ranges.num_cars[1])
    t_hi = min(ranges.num_trucks[1], total - ranges.num_cars[0])
    trucks = int(rng.integers(t_lo, t_hi + 1))
    d_lo, d_hi = ranges.density
    density = float(d_hi - (d_hi - d_lo) * rng.random())  # in (lo, hi]
    lane_count = int(rng.integers(ranges.lane_count[0], ranges.lane_count[1] + 1))
    return ScenarioConfig(
        id=_fresh_id(rng),
        num_aggressive=counts[0],
        num_defensive=counts[1],
        num_regular=counts[2],
        num_trucks=trucks,
        num_cars=total - trucks,
        density=density,
        lane_count=lane_count,
        seed=int(rng.integers(0, 2**31)),
    )


def _fill_counts(total: int, ranges: ValidRanges) -> list[int]:
    bounds = [ranges.num_aggressive, ranges.num_defensive, ranges.num_regular]
    counts = [lo for lo, _ in bounds]
    for i, (_, hi) in enumerate(bounds):
        add = min(hi - counts[i], total - sum(counts))
        counts[i] += add
    return counts


def perturb_config(
    base: ScenarioConfig,
    scale: float,
    rng_seed: int,
    ranges: ValidRanges = DEFAULT_RANGES,
) -> ScenarioConfig:
    """Return a nearby variant of ``base`` with a fresh identifier.

    Every numeric field moves by at most ``scale`` times its range width and
    stays inside its range. The truck/car split is re-derived from the new
    behavior total in the base's truck share, within the same per-field bound.
    """
    if not 0 <= scale <= 1:
        raise ValueError(f"scale must lie in [0, 1], got {scale}")
    rng = np.random.default_rng(rng_seed)
    new_id = _fresh_id(rng, prefix=base.id.split("~")[0] + "~p")

    def step_int(name: str, value: int) -> tuple[int, int, int]:
        lo, hi = getattr(ranges, name)
        limit = int(math.floor(scale * (hi - lo) + 1e-9))
        box = (max(lo, value - limit), min(hi, value + limit))
        delta = int(np.trunc(rng.uniform(-1, 1) * (limit + 1)))
        delta = max(-limit, min(limit, delta))
        return min(max(value + delta, box[0]), box[1]), box[0], box[1]

    behaviors = {}
    boxes = {}
    for name in ("num_aggressive", "num_defensive", "num_regular"):
        value, lo, hi = step_int(name, getattr(base, name))
        behaviors[name] = value
        boxes[name] = (lo, hi)
    for name in ("num_trucks", "num_cars"):
        limit = int(math.floor(scale * ranges.width(name) + 1e-9))
        lo, hi = getattr(ranges, name)
        v = getattr(base, name)
        boxes[name] = (max(lo, v - limit), min(hi, v + limit))

    total = sum(behaviors.values())
    kind_lo = boxes["num_trucks"][0] + boxes["num_cars"][0]
    kind_hi = boxes["num_trucks"][1] + boxes["num_cars"][1]
    # pull the behavior total into what the kind boxes can express
    order = ("num_regular", "num_defensive", "num_aggressive")
    while total > kind_hi:
        for name in order:
            if total > kind_hi and behaviors[name] > boxes[name][0]:
                behaviors[name] -= 1
                total -= 1
    while total < kind_lo:
        for name in order:
            if total < kind_lo and behaviors[name] < boxes[name][1]:
                behaviors[name] += 1
                total += 1
    share = base.num_trucks / base.num_vehicles if base.num_vehicles else 0.0
    t_lo = max(boxes["num_trucks"][0], total - boxes["num_cars"][1])
    t_hi = min(boxes["num_trucks"][1], total - boxes["num_cars"][0])
    trucks = min(max(int(round(total * share)), t_lo), t_hi)

    d_lo, d_hi = ranges.density
    d_width = d_hi - d_lo
    density = base.density + rng.uniform(-1, 1) * scale * d_width
    density = min(max(density, math.nextafter(d_lo, math.inf)), d_hi)
    lane_count, _, _ = step_int("lane_count", base.lane_count)

    pair = base.critical_pair
    if pair is not None:
        pair = tuple(_perturb_seed(s, scale, rng, ranges, lane_count) for s in pair)

    out = replace(
        base,
        id=new_id,
        num_trucks=trucks,
        num_cars=total - trucks,
        density=density,
        lane_count=lane_count,
        critical_pair=pair,
        **behaviors,
    )
    if out.critical_pair is not None:
        out = replace(out, critical_pair=_fit_pair(out) if out.num_vehicles >= 2 else None)
    return validate_config(out, ranges)


def _perturb_seed(seed: VehicleSeed, scale: float, rng, ranges: ValidRanges, lane_count: int) -> VehicleSeed:
    def move(value, name):
        lo, hi = getattr(ranges, name)
        return min(max(value + rng.uniform(-1, 1) * scale * (hi - lo), lo), hi)

    return replace(
        seed,
        longitudinal_position=move(seed.longitudinal_position, "x"),
        speed=move(seed.speed, "speed"),
        acceleration=move(seed.acceleration, "acceleration"),
        lane_index=min(seed.lane_index, lane_count - 1),
    )


def empty_config(config_id: str = "empty", lane_count: int = 2, seed: int = 0) -> ScenarioConfig:
    """A configuration with no background traffic."""
    return ScenarioConfig(config_id, 0, 0, 0, 0, 0, density=1.0, lane_count=lane_count, seed=seed)


__all__ = [
    "BEHAVIORS",
    "KINDS",
    "BehaviorParams",
    "ConfigurationError",
    "DatabaseError",
    "DEFAULT_RANGES",
    "ScenarioConfig",
    "ValidRanges",
    "ValidationError",
    "VehicleSeed",
    "behavior_params",
    "empty_config",
    "load_database",
    "parse_database",
    "perturb_config",
    "reconcile",
    "sample_config",
    "save_database",
    "serialize_database",
    "split_kinds",
    "validate_config",
]
