import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critgen.scenario import (
    ConfigurationError, DatabaseError, ScenarioConfig, ValidationError, ValidRanges, VehicleSeed,
    behavior_params, empty_config, load_database, parse_database, perturb_config, reconcile,
    sample_config, save_database, serialize_database, split_kinds, validate_config,
)


def cfg(**kw):
    base = dict(id="c", num_aggressive=2, num_defensive=3, num_regular=5, num_trucks=2, num_cars=8,
                density=20.0, lane_count=3, seed=1)
    base.update(kw)
    return ScenarioConfig(**base)


def pair(**kw):
    a = VehicleSeed(60.0, 1, 25.0, 0.0, "aggressive", "car")
    b = VehicleSeed(80.0, 1, 20.0, -1.0, "regular", "truck")
    return (replace(a, **kw), b)


def test_valid_config_passes():
    c = cfg(critical_pair=pair())
    assert validate_config(c) is c


@pytest.mark.parametrize("field,value", [
    ("num_aggressive", 31), ("density", 0.0), ("density", 61.0), ("lane_count", 1), ("lane_count", 5),
    ("seed", -1), ("id", ""),
])
def test_out_of_range_fields_are_named(field, value):
    with pytest.raises(ValidationError) as err:
        validate_config(cfg(**{field: value}))
    assert err.value.field == field


def test_partition_invariant():
    with pytest.raises(ValidationError, match="behavior counts"):
        validate_config(cfg(num_cars=9))


def test_pair_checks():
    with pytest.raises(ValidationError, match="vehicle_i.lane"):
        validate_config(cfg(critical_pair=pair(lane_index=3)))
    with pytest.raises(ValidationError, match="vehicle_i.speed"):
        validate_config(cfg(critical_pair=pair(speed=70.0)))
    with pytest.raises(ValidationError, match="aggressive"):
        validate_config(cfg(num_aggressive=0, num_regular=7, critical_pair=pair()))


def test_round_trip_and_stable_order(tmp_path):
    configs = [cfg(id="a"), cfg(id="b", critical_pair=pair())]
    path = tmp_path / "db.json"
    save_database(configs, path)
    loaded = load_database(path)
    assert loaded == configs
    assert serialize_database(loaded) == path.read_text()


def test_database_errors_name_record_and_field():
    good = cfg().to_dict()
    bad = dict(good)
    del bad["density"]
    with pytest.raises(DatabaseError) as err:
        parse_database(json.dumps([good, bad]))
    assert err.value.index == 1 and err.value.field == "density"
    with pytest.raises(DatabaseError):
        parse_database("not json")
    with pytest.raises(ValidationError, match="record 0"):
        parse_database(json.dumps([dict(good, density=99)]))


def test_split_kinds_and_reconcile():
    assert split_kinds(10, 0.25) == (2, 8)
    assert split_kinds(40, 0.0) == (10, 30)  # car cap pushes the rest into trucks
    r = reconcile(cfg(num_regular=9))  # behavior total now 14
    assert r.num_vehicles == 14 and r.num_trucks == round(14 * 0.2)
    validate_config(r)


def test_reconcile_relabels_uncovered_pair():
    c = reconcile(cfg(num_aggressive=0, num_regular=7, critical_pair=pair()))
    assert c.critical_pair[0].behavior_class != "aggressive"
    validate_config(c)


def test_sample_is_deterministic_and_valid():
    assert sample_config(7) == sample_config(7)
    assert sample_config(7) != sample_config(8)
    for s in range(200):
        validate_config(sample_config(s))


def test_infeasible_ranges():
    with pytest.raises(ConfigurationError):
        sample_config(0, ValidRanges(num_trucks=(0, 1), num_cars=(0, 1), num_aggressive=(5, 5)))


def test_behavior_params_truck_speed_cap():
    assert behavior_params("aggressive", "truck").desired_speed <= 25.0
    assert behavior_params("aggressive").desired_speed > behavior_params("defensive").desired_speed


def test_density_at_max_stays_at_max():
    c = cfg(density=60.0)
    hits = [perturb_config(c, 0.5, s).density for s in range(50)]
    assert max(hits) == 60.0 and all(h <= 60.0 for h in hits)


def test_empty_config_has_no_traffic():
    e = empty_config()
    assert validate_config(e).num_vehicles == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.integers(0, 10_000))
def test_perturb_bounded_and_valid(seed, scale, pseed):
    r = ValidRanges()
    base = sample_config(seed)
    if seed % 2:
        n = base.num_vehicles
        if n >= 2:
            b = [k for k, v in base.behavior_counts().items() for _ in range(v)]
            kd = [k for k, v in base.kind_counts().items() for _ in range(v)]
            base = replace(base, critical_pair=(VehicleSeed(100, 0, 20, 0, b[0], kd[0]),
                                                VehicleSeed(130, 0, 15, 0, b[1], kd[1])))
    out = perturb_config(base, scale, pseed)
    validate_config(out)
    assert out.id != base.id
    for name in ("num_aggressive", "num_defensive", "num_regular", "num_trucks", "num_cars",
                 "density", "lane_count"):
        assert abs(getattr(out, name) - getattr(base, name)) <= scale * r.width(name) + 1e-9
    assert perturb_config(base, scale, pseed) == out
