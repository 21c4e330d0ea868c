import json

import pytest

from critgen.experiments import RunSettings, eval_seed, evaluate, run_arm
from critgen.ppo import PpoConfig, init_params
from critgen.scenario import empty_config, sample_config

FAST = RunSettings(epochs=2, episodes_per_config=1, eval_runs=2, max_steps=6,
                   ppo=PpoConfig(steps_per_update=16, minibatch_size=8, update_epochs=1))


def test_settings_round_trip():
    s = RunSettings(total_steps=1000, ppo=PpoConfig(hidden_sizes=(8, 8)))
    d = json.loads(json.dumps(s.to_dict()))
    assert RunSettings.from_dict(d) == s
    with pytest.raises(KeyError):
        RunSettings.from_dict({"epoch": 1})


def test_eval_seeds_distinct():
    seeds = {eval_seed(0, c, r) for c in range(10) for r in range(10)}
    assert len(seeds) == 100


def test_evaluate_counts_and_determinism():
    configs = [empty_config("a"), sample_config(3)]
    a = evaluate(init_params(seed=1), configs, 3, 0, 10)
    b = evaluate(init_params(seed=1), configs, 3, 0, 10)
    assert a.rows == b.rows and len(a.rows) == 6
    per = a.per_config()
    assert [p["episodes"] for p in per] == [3, 3]
    assert a.crashes == sum(p["crashes"] for p in per)


def test_run_arm_checks():
    with pytest.raises(ValueError):
        run_arm("random", [empty_config()])
    with pytest.raises(ValueError):
        run_arm("llm", [empty_config()])


def test_arm_outputs(tmp_path):
    train = [sample_config(s) for s in range(3)]
    res = run_arm("critical", train, [sample_config(9)], FAST, seed=2)
    paths = res.write(tmp_path)
    assert set(paths) == {"training", "experiment", "params", "evaluation"}
    lines = paths["experiment"].read_text().splitlines()
    head = json.loads(lines[0])
    assert head["type"] == "run" and head["strategy"] == "direct"
    assert head["train_configs"] == [c.id for c in train]
    epochs = [json.loads(ln) for ln in lines[1:]]
    assert [e["epoch"] for e in epochs] == [0, 1]
    assert all(e["evaluation"]["episodes"] == 2 for e in epochs)
    assert head["evaluation"] == res.evaluation.summary()
