"""How risky is a lane change into a tight gap?

Run with ``python3 demos/risk_on_the_road.py``. The script builds one
configuration with a slow truck ahead of the ego, drives it with two
hand-written policies and prints the surrogate safety measures step by step.
"""

# %% A single interaction, measured by hand
from critgen.risk import Leader, Neighbor, RiskParams, d_min_lon, pair_risk, ttc

# The ego follows a truck 30 m ahead, closing at 8 m/s, while a car drifts
# toward it from the next lane.
leader = Leader(gap=30.0, v_ego=28.0, v_leader=20.0)
neighbor = Neighbor(d_lat=0.6, v_lat_ego=0.0, v_lat_nln=-0.8)
print(f"time to collision      {ttc(30.0, 8.0):.2f} s")
print(f"safe following gap     {d_min_lon(28.0, 20.0):.1f} m")
step = pair_risk(leader, neighbor)
print(f"unified risk           {step.r:.3f}")

# %% The same idea over a whole episode
from critgen.scenario import ScenarioConfig, VehicleSeed, validate_config
from critgen.traffic import Action, run_episode

truck = VehicleSeed(70.0, 0, 18.0, 0.0, "defensive", "truck")
car = VehicleSeed(40.0, 1, 24.0, 0.0, "aggressive", "car")
config = validate_config(ScenarioConfig("tight-gap", 1, 2, 3, 1, 5, 6.0, 2, 3, (truck, car)))

policies = {
    "keep speed": lambda obs: Action.IDLE,
    "always faster": lambda obs: Action.FASTER,
}
for name, policy in policies.items():
    result = run_episode(config, policy, max_steps=30, seed=1, risk_params=RiskParams(), record_trace=True)
    rep = result.risk
    print(f"\n{name}: reward {result.total_reward:.2f}, steps {result.length}, crashed {result.crashed}")
    print(f"  TTC near misses {rep.ttc_near_miss_count}, r exceedances {rep.r_threshold_count}, "
          f"min TTC {rep.min_ttc:.2f} s, max r {rep.max_r:.3f}")
    speeds = [round(w.ego.vx, 1) for w in result.trace[::5]]
    print(f"  ego speed every 5 s: {speeds}")
