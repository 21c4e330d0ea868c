import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critgen import ppo as P
from critgen.scenario import empty_config, sample_config


def toy_batch(params, n, rng, obs_size):
    obs = rng.normal(size=(n, obs_size))
    actions = rng.integers(5, size=n)
    probs, values = P.policy_forward(params, obs)
    logp = np.log(probs[np.arange(n), actions])
    return P.RolloutBatch(obs, actions, logp, np.zeros(n), np.zeros(n, bool), values,
                          rng.normal(size=n), rng.normal(size=n))


def test_zero_weights_uniform():
    p = P.init_params(4, 5, (8,), seed=0)
    p = p.with_flat(np.zeros_like(p.flat()))
    probs, value = P.policy_forward(p, np.ones(4))
    assert np.allclose(probs, 0.2) and value == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(-50, 50))
def test_softmax_simplex(seed, scale):
    p = P.init_params(6, 5, (8, 8), seed=seed)
    p = p.with_flat(p.flat() * 10)
    obs = np.random.default_rng(seed).normal(size=6) * scale
    probs, _ = P.policy_forward(p, obs)
    assert abs(probs.sum() - 1) < 1e-9 and np.all(probs >= 0) and np.all(probs <= 1)


def test_forward_pure_and_shape_checked():
    p = P.init_params(seed=3)
    obs = np.linspace(-1, 1, 33)
    a, b = P.policy_forward(p, obs), P.policy_forward(p, obs)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    with pytest.raises(ValueError):
        P.policy_forward(p, np.zeros(32))


def test_clipped_objective_examples():
    assert P.clipped_objective(1.0, -3.7) == -3.7
    assert P.clipped_objective(1.5, 2.0, 0.2) == pytest.approx(2.4)
    assert P.clipped_objective(0.5, -1.0, 0.2) == pytest.approx(-0.8)


def brute_gae(r, v, d, last, g, lam):
    # sum of discounted TD errors, truncated at episode ends
    n = len(r)
    nxt = list(v[1:]) + [last]
    delta = [r[t] + g * nxt[t] * (1 - d[t]) - v[t] for t in range(n)]
    out = []
    for t in range(n):
        total, w = 0.0, 1.0
        for k in range(t, n):
            total += w * delta[k]
            if d[k]:
                break
            w *= g * lam
        out.append(total)
    return np.array(out)


def test_gae_examples():
    adv, ret = P.compute_gae([0, 0, 0], [0, 0, 0], [0, 0, 0], 0.0)
    assert np.all(adv == 0) and np.all(ret == 0)
    adv, _ = P.compute_gae([1.0], [0.0], [True], 0.0)
    assert adv[0] == 1.0
    r, v, d = [1.0, -0.5, 2.0], [0.3, 0.1, -0.2], [False, False, False]
    adv, ret = P.compute_gae(r, v, d, 0.7, 0.9, 0.95)
    assert np.allclose(adv, brute_gae(r, v, d, 0.7, 0.9, 0.95), atol=1e-12)
    assert np.allclose(ret, adv + np.array(v))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.booleans()), min_size=1, max_size=12),
       st.floats(-5, 5), st.floats(0.5, 1.0), st.floats(0, 1))
def test_gae_matches_brute_force(rows, last, g, lam):
    r, v, d = map(list, zip(*rows))
    adv, _ = P.compute_gae(r, v, d, last, g, lam)
    assert np.allclose(adv, brute_gae(r, v, d, last, g, lam), atol=1e-9)


def test_ratio_identity_and_zero_clip_fraction():
    rng = np.random.default_rng(0)
    p = P.init_params(6, 5, (8, 8), seed=1)
    b = toy_batch(p, 32, rng, 6)
    parts, _ = P.loss_and_grads(p, b, P.PpoConfig(entropy_coeff=0.0, value_loss_coeff=0.0))
    assert parts.clip_fraction == 0.0
    assert parts.policy_loss == pytest.approx(-b.advantages.mean(), abs=1e-12)


def test_zero_learning_rate_keeps_params():
    rng = np.random.default_rng(1)
    p = P.init_params(6, 5, (8,), seed=2)
    b = toy_batch(p, 40, rng, 6)
    new, metrics = P.update(p, b, P.PpoConfig(learning_rate=0.0, minibatch_size=8, update_epochs=2))
    assert np.array_equal(new.flat(), p.flat())
    assert 0 <= metrics["clip_fraction"] <= 1


def test_zero_advantage_no_policy_gradient():
    rng = np.random.default_rng(2)
    p = P.init_params(6, 5, (8,), seed=3)
    b = toy_batch(p, 20, rng, 6)
    b.advantages[:] = 0.0
    cfg = P.PpoConfig(entropy_coeff=0.0, normalize_advantages=False)
    _, g = P.loss_and_grads(p, b, cfg)
    assert all(np.all(W == 0) and np.all(bias == 0) for W, bias in g.pi)
    assert any(np.any(W != 0) for W, _ in g.vf)


def test_non_finite_aborts():
    rng = np.random.default_rng(3)
    p = P.init_params(6, 5, (8,), seed=4)
    b = toy_batch(p, 10, rng, 6)
    b.returns[0] = np.nan
    with pytest.raises(P.UpdateAborted, match="non-finite"):
        P.update(p, b, P.PpoConfig(minibatch_size=10))


def test_grad_norm_clipped_step_bounded():
    rng = np.random.default_rng(4)
    p = P.init_params(6, 5, (8,), seed=5)
    b = toy_batch(p, 16, rng, 6)
    b.returns[:] = 1e6
    cfg = P.PpoConfig(minibatch_size=16, update_epochs=1, learning_rate=1e-3)
    new, _ = P.update(p, b, cfg)
    assert np.max(np.abs(new.flat() - p.flat())) <= 1e-3 * 1.0001  # one Adam step moves each weight <= lr


def test_config_validation():
    with pytest.raises(ValueError):
        P.PpoConfig(clip_epsilon=1.0)
    with pytest.raises(ValueError):
        P.PpoConfig(discount=0.0)
    assert P.PpoConfig.from_dict(P.config_dict(P.PpoConfig())) == P.PpoConfig()


def test_orthogonal_init():
    W = P.orthogonal((10, 4), 2.0, np.random.default_rng(0))
    assert np.allclose(W.T @ W, 4.0 * np.eye(4))


def test_params_save_load(tmp_path):
    p = P.init_params(seed=9)
    p.save(tmp_path / "p.npz")
    q = P.PolicyParams.load(tmp_path / "p.npz")
    assert np.array_equal(p.flat(), q.flat()) and q.hidden_sizes == (64, 64) and q.seed == 9


def test_train_zero_steps():
    params, log = P.train([empty_config()], total_steps=0, seed=4)
    assert np.array_equal(params.flat(), P.init_params(seed=4).flat())
    assert log.records() == []
    with pytest.raises(ValueError):
        P.train([], total_steps=10)


def test_train_logs_and_determinism(tmp_path):
    cfg = P.PpoConfig(steps_per_update=64, minibatch_size=32, update_epochs=2)
    configs = [sample_config(1), sample_config(2)]
    _, log_a = P.train(configs, cfg, total_steps=300, seed=7)
    _, log_b = P.train(configs, cfg, total_steps=300, seed=7)
    log_a.write(tmp_path / "a.jsonl")
    log_b.write(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    recs = P.read_log(tmp_path / "a.jsonl")
    ups = [r for r in recs if r["type"] == "update"]
    eps = [r for r in recs if r["type"] == "episode"]
    assert ups and eps
    for key in ("update_index", "steps", "mean_reward", "mean_episode_len", "crash_count", "policy_loss",
                "value_loss", "entropy", "clip_fraction", "loss"):
        assert key in ups[0]
    for key in ("config_id", "reward", "length", "crashed", "ttc_near_miss_count", "r_threshold_count"):
        assert key in eps[0]
    assert [u["update_index"] for u in ups] == list(range(len(ups)))
    assert all(np.isfinite(u["loss"]) for u in ups)
