"""Surrogate safety measures for ego-centred highway interactions.

Time to collision, RSS-style minimum safe distances, longitudinal/lateral
risk indices and their product (the unified risk index), the risk
perception score used to rank recorded vehicle pairs, and per-episode
threshold counters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, NamedTuple

if TYPE_CHECKING:
    from .traffic import WorldState

INF = math.inf


@dataclass(frozen=True)
class RssParams:
    rho: float = 1.0  # response time [s]
    a_max: float = 3.0  # max acceleration during response [m/s2]
    b_min: float = 4.0  # minimum braking [m/s2]
    b_max: float = 8.0  # maximum braking [m/s2]

    def __post_init__(self):
        if self.rho < 0 or self.a_max < 0 or self.b_min <= 0 or self.b_max <= 0:
            raise ValueError("RSS parameters must be non-negative with positive braking")
        if self.b_max < self.b_min:
            raise ValueError("b_max must be at least b_min")


@dataclass(frozen=True)
class RiskParams:
    beta: float = 1.0
    gamma: float = 1.0
    ttc_threshold: float = 2.0
    r_threshold: float = 0.3
    rss: RssParams = RssParams()

    def __post_init__(self):
        if self.beta <= 0 or self.gamma <= 0:
            raise ValueError("beta and gamma must be positive")
        if self.ttc_threshold <= 0:
            raise ValueError("ttc_threshold must be positive")
        if not 0 < self.r_threshold < 1:
            raise ValueError("r_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class RpParams:
    a_coeff: float = 1.0
    b_coeff: float = 4.0

    def __post_init__(self):
        if self.a_coeff <= 0 or self.b_coeff <= 0:
            raise ValueError("RP coefficients must be positive")


def ttc(x_rel: float, v_rel_closing: float) -> float:
    """Time to collision; infinite unless the gap is closing."""
    if x_rel < 0:
        raise ValueError(f"x_rel must be non-negative, got {x_rel}")
    if v_rel_closing <= 0:
        return INF
    return x_rel / v_rel_closing


def d_min_lon(v_r: float, v_f: float, p: RssParams = RssParams()) -> float:
    """Minimum safe longitudinal gap for a rear vehicle at ``v_r`` behind one at ``v_f``."""
    if v_r < 0 or v_f < 0:
        raise ValueError("speeds must be non-negative")
    d = (
        v_r * p.rho
        + 0.5 * p.rho**2 * p.a_max
        + (v_r + p.rho * p.a_max) ** 2 / (2 * p.b_min)
        - v_f**2 / (2 * p.b_max)
    )
    return max(d, 0.0)


def d_min_lat(v_lat_ego: float, v_lat_nln: float, p: RssParams = RssParams()) -> float:
    """Minimum safe lateral gap between the ego and its nearest lane neighbor.

    Both velocities are signed along the axis pointing from the ego toward
    the neighbor, so a neighbor moving toward the ego has a negative value.
    """
    ego = v_lat_ego * p.rho + v_lat_ego**2 / (4 * p.b_min)
    nln = v_lat_nln * p.rho + v_lat_nln**2 / (4 * p.b_min)
    return max(ego - nln, 0.0)


def _index(d: float, d_min: float) -> float:
    if d_min > d:
        return 1.0 - d / d_min
    return 0.0


def risk_indices(d_lon: float, d_lat: float, dmin_lon: float, dmin_lat: float) -> tuple[float, float]:
    if d_lon < 0 or d_lat < 0 or dmin_lon < 0 or dmin_lat < 0:
        raise ValueError("distances must be non-negative")
    return _index(d_lon, dmin_lon), _index(d_lat, dmin_lat)


def unified_risk(r_lon: float, r_lat: float, rp: RiskParams = RiskParams()) -> float:
    return r_lon**rp.beta * r_lat**rp.gamma


def rp(thw: float, ttc_value: float, p: RpParams = RpParams()) -> float:
    """Risk perception ``A/THW + B/TTC``; an infinite input contributes nothing."""
    for name, value in (("thw", thw), ("ttc", ttc_value)):
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")
    total = 0.0
    if math.isfinite(thw):
        total += p.a_coeff / thw
    if math.isfinite(ttc_value):
        total += p.b_coeff / ttc_value
    return total


@dataclass(frozen=True)
class StepRisk:
    """Worst surrogate values seen during one policy step."""

    ttc: float = INF
    r: float = 0.0

    def merge(self, other: StepRisk) -> StepRisk:
        return StepRisk(min(self.ttc, other.ttc), max(self.r, other.r))


@dataclass(frozen=True)
class RiskReport:
    ttc_near_miss_count: int = 0
    r_threshold_count: int = 0
    min_ttc: float = INF
    max_r: float = 0.0
    crashed: bool = False

    def update(self, step: StepRisk, params: RiskParams = RiskParams()) -> RiskReport:
        return RiskReport(
            ttc_near_miss_count=self.ttc_near_miss_count + (step.ttc < params.ttc_threshold),
            r_threshold_count=self.r_threshold_count + (step.r > params.r_threshold),
            min_ttc=min(self.min_ttc, step.ttc),
            max_r=max(self.max_r, step.r),
            crashed=self.crashed,
        )

    def with_crash(self) -> RiskReport:
        return replace(self, crashed=True)

    def to_dict(self) -> dict:
        return {
            "ttc_near_miss_count": self.ttc_near_miss_count,
            "r_threshold_count": self.r_threshold_count,
            "min_ttc": None if math.isinf(self.min_ttc) else self.min_ttc,
            "max_r": self.max_r,
            "crashed": self.crashed,
        }


class Leader(NamedTuple):
    gap: float  # bumper-to-bumper, clamped at 0
    v_ego: float
    v_leader: float


class Neighbor(NamedTuple):
    d_lat: float  # lateral edge gap, clamped at 0
    v_lat_ego: float  # signed toward the neighbor
    v_lat_nln: float


def pair_risk(leader: Leader | None, neighbor: Neighbor | None, params: RiskParams = RiskParams()) -> StepRisk:
    """TTC against the leader; unified risk from the leader gap and the neighbor gap."""
    if leader is None:
        return StepRisk()
    step_ttc = ttc(leader.gap, leader.v_ego - leader.v_leader)
    r = 0.0
    if neighbor is not None:
        dmin_lon = d_min_lon(leader.v_ego, leader.v_leader, params.rss)
        dmin_lat = d_min_lat(neighbor.v_lat_ego, neighbor.v_lat_nln, params.rss)
        r_lon, r_lat = risk_indices(leader.gap, neighbor.d_lat, dmin_lon, dmin_lat)
        r = unified_risk(r_lon, r_lat, params)
    return StepRisk(step_ttc, r)


def assess(world: WorldState, params: RiskParams = RiskParams()) -> StepRisk:
    """Surrogate values for the ego in one world snapshot."""
    from .traffic import ego_partners

    return pair_risk(*ego_partners(world), params)


def accumulate(report: RiskReport, world: WorldState, params: RiskParams = RiskParams()) -> RiskReport:
    """Fold one world snapshot into an episode report."""
    return report.update(assess(world, params), params)
