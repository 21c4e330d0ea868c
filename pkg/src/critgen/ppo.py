"""Proximal policy optimization with numpy networks and hand-written gradients.

Policy and value functions are separate tanh MLPs. Rollouts are gathered
from :class:`critgen.traffic.HighwayEnv`; advantages use GAE(lambda), and
each update runs several epochs of minibatch Adam steps on the combined
clipped-surrogate, value and entropy loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .risk import RiskParams
from .scenario import ScenarioConfig
from .traffic import MAX_EPISODE_STEPS, N_ACTIONS, OBS_SIZE, EpisodeResult, HighwayEnv


class UpdateAborted(FloatingPointError):
    """A loss or gradient became non-finite; parameters were left unchanged."""


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    steps_per_update: int = 4096
    minibatch_size: int = 256
    update_epochs: int = 10
    value_loss_coeff: float = 0.5
    entropy_coeff: float = 0.01
    max_grad_norm: float = 0.5
    hidden_sizes: tuple[int, ...] = (64, 64)
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.steps_per_update < 1 or self.minibatch_size < 1 or self.update_epochs < 1:
            raise ValueError("batch sizes and epochs must be positive")
        if self.learning_rate < 0 or self.max_grad_norm <= 0:
            raise ValueError("learning_rate must be >= 0 and max_grad_norm > 0")

    @classmethod
    def from_dict(cls, data: dict) -> PpoConfig:
        data = dict(data)
        if "hidden_sizes" in data:
            data["hidden_sizes"] = tuple(int(h) for h in data["hidden_sizes"])
        return cls(**data)


# ---------------------------------------------------------------- networks


@dataclass
class PolicyParams:
    """Weights of both networks: ``pi`` maps to action logits, ``vf`` to a scalar.

    Each network is a list of (W, b) layers with ``W`` shaped (fan_in, fan_out).
    """

    pi: list[tuple[np.ndarray, np.ndarray]]
    vf: list[tuple[np.ndarray, np.ndarray]]
    seed: int = 0

    @property
    def obs_size(self) -> int:
        return self.pi[0][0].shape[0]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(W.shape[1] for W, _ in self.pi[:-1])

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for net in ("pi", "vf"):
            for i, (W, b) in enumerate(getattr(self, net)):
                out[f"{net}.{i}.W"] = W
                out[f"{net}.{i}.b"] = b
        return out

    def copy(self) -> PolicyParams:
        return PolicyParams([(W.copy(), b.copy()) for W, b in self.pi],
                            [(W.copy(), b.copy()) for W, b in self.vf], self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    def with_flat(self, theta: np.ndarray) -> PolicyParams:
        new = self.copy()
        k = 0
        for net in (new.pi, new.vf):
            for W, b in net:
                for a in (W, b):
                    a[...] = theta[k:k + a.size].reshape(a.shape)
                    k += a.size
        return new

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    def save(self, path) -> None:
        with open(path, "wb") as fp:
            np.savez(fp, seed=np.array(self.seed), **self.arrays())

    @classmethod
    def load(cls, path) -> PolicyParams:
        with np.load(path) as data:
            nets = {}
            for net in ("pi", "vf"):
                layers = []
                while f"{net}.{len(layers)}.W" in data:
                    i = len(layers)
                    layers.append((data[f"{net}.{i}.W"].copy(), data[f"{net}.{i}.b"].copy()))
                if not layers:
                    raise ValueError(f"{path}: no {net} layers")
                nets[net] = layers
            return cls(nets["pi"], nets["vf"], int(data["seed"]))


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(obs_size: int = OBS_SIZE, n_actions: int = N_ACTIONS,
                hidden_sizes: Sequence[int] = (64, 64), seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng(seed)

    def net(out_size, out_gain):
        sizes = [obs_size, *hidden_sizes]
        layers = [(orthogonal((i, o), math.sqrt(2), rng), np.zeros(o)) for i, o in zip(sizes[:-1], sizes[1:])]
        layers.append((orthogonal((sizes[-1], out_size), out_gain, rng), np.zeros(out_size)))
        return layers

    return PolicyParams(net(n_actions, 0.01), net(1, 1.0), seed)


def _mlp(layers, x):
    """Forward pass keeping the activations needed by :func:`_mlp_backward`."""
    acts = [x]
    h = x
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
        acts.append(h)
    W, b = layers[-1]
    return h @ W + b, acts


def _mlp_backward(layers, acts, d_out):
    grads = [None] * len(layers)
    d = d_out
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[i] = (acts[i].T @ d, d.sum(axis=0))
        if i:
            d = (d @ W.T) * (1.0 - acts[i] ** 2)
    return grads


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def policy_forward(params: PolicyParams, observation: np.ndarray) -> tuple[np.ndarray, np.ndarray | float]:
    """Action probabilities and value estimate for one observation or a batch."""
    obs = np.asarray(observation, dtype=float)
    single = obs.ndim == 1
    batch = obs[None, :] if single else obs
    if batch.ndim != 2 or batch.shape[1] != params.obs_size:
        raise ValueError(f"observation shape {obs.shape} does not match input size {params.obs_size}")
    logits, _ = _mlp(params.pi, batch)
    value, _ = _mlp(params.vf, batch)
    probs = np.exp(_log_softmax(logits))
    if single:
        return probs[0], float(value[0, 0])
    return probs, value[:, 0]


# ---------------------------------------------------------------- objective


def clipped_objective(ratio, advantage, epsilon: float = 0.2):
    """Per-sample clipped surrogate ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - epsilon, 1 + epsilon) * advantage)


def compute_gae(rewards, values, dones, last_value: float, discount: float = 0.99,
                gae_lambda: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """GAE(lambda) advantages and returns; ``dones[t]`` stops bootstrapping past step t."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not len(rewards) == len(values) == len(dones):
        raise ValueError("rewards, values and dones must have equal length")
    adv = np.zeros(len(rewards))
    running = 0.0
    next_value = last_value
    for t in range(len(rewards) - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + discount * next_value * live - values[t]
        running = delta + discount * gae_lambda * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


@dataclass
class RolloutBatch:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        n = len(self.actions)
        for name in ("observations", "log_probs", "rewards", "dones", "values", "advantages", "returns"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.actions)

    def subset(self, idx) -> RolloutBatch:
        return RolloutBatch(**{k: v[idx] for k, v in self.__dict__.items()})


@dataclass
class LossParts:
    total: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float


def loss_and_grads(params: PolicyParams, batch: RolloutBatch, config: PpoConfig) -> tuple[LossParts, PolicyParams]:
    """Combined loss ``-mean(clipped) + c_v mean((V-R)^2) - c_e mean(H)`` and its exact gradient.

    The gradient is returned in the shape of ``params``.
    """
    n = len(batch)
    eps = config.clip_epsilon
    logits, pi_acts = _mlp(params.pi, batch.observations)
    values, vf_acts = _mlp(params.vf, batch.observations)
    values = values[:, 0]
    logp_all = _log_softmax(logits)
    probs = np.exp(logp_all)
    rows = np.arange(n)
    logp = logp_all[rows, batch.actions]
    ratio = np.exp(logp - batch.log_probs)
    adv = batch.advantages
    surrogate = clipped_objective(ratio, adv, eps)
    entropy = -(probs * logp_all).sum(axis=1)

    policy_loss = -surrogate.mean()
    value_loss = np.mean((values - batch.returns) ** 2)
    total = policy_loss + config.value_loss_coeff * value_loss - config.entropy_coeff * entropy.mean()

    # d(-surrogate)/d logp: the unclipped branch carries r*A, the clipped one is flat
    unclipped = ratio * adv <= np.clip(ratio, 1 - eps, 1 + eps) * adv
    d_logp = -(unclipped * adv * ratio) / n
    onehot = np.zeros_like(probs)
    onehot[rows, batch.actions] = 1.0
    d_logits = d_logp[:, None] * (onehot - probs)
    d_logits += config.entropy_coeff / n * probs * (logp_all + entropy[:, None])
    d_values = (2.0 * config.value_loss_coeff / n) * (values - batch.returns)

    grads = PolicyParams(
        _mlp_backward(params.pi, pi_acts, d_logits),
        _mlp_backward(params.vf, vf_acts, d_values[:, None]),
        params.seed,
    )
    parts = LossParts(
        total=float(total),
        policy_loss=float(policy_loss),
        value_loss=float(value_loss),
        entropy=float(entropy.mean()),
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > eps)),
    )
    return parts, grads


class Adam:
    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def update(params: PolicyParams, batch: RolloutBatch, config: PpoConfig, optimizer: Adam | None = None,
           rng: np.random.Generator | None = None) -> tuple[PolicyParams, dict]:
    """Several epochs of clipped-objective minibatch steps; returns new params and mean metrics."""
    optimizer = optimizer or Adam(config.learning_rate)
    rng = rng or np.random.default_rng(0)
    if config.normalize_advantages and len(batch) > 1:
        adv = batch.advantages
        batch = RolloutBatch(**{**batch.__dict__, "advantages": (adv - adv.mean()) / (adv.std() + 1e-8)})
    theta = params.flat()
    current = params
    history = []
    for _ in range(config.update_epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), config.minibatch_size):
            mb = batch.subset(order[start:start + config.minibatch_size])
            parts, grads = loss_and_grads(current, mb, config)
            g = grads.flat()
            if not (math.isfinite(parts.total) and np.all(np.isfinite(g))):
                raise UpdateAborted(
                    f"non-finite loss or gradient (loss={parts.total}, policy={parts.policy_loss}, "
                    f"value={parts.value_loss}, entropy={parts.entropy})"
                )
            norm = float(np.linalg.norm(g))
            if norm > config.max_grad_norm:
                g = g * (config.max_grad_norm / norm)
            theta = optimizer.step(theta, g)
            current = params.with_flat(theta)
            history.append(parts)
    if not current.is_finite():
        raise UpdateAborted("parameters became non-finite")
    metrics = {
        name: float(np.mean([getattr(p, name) for p in history]))
        for name in ("total", "policy_loss", "value_loss", "entropy", "clip_fraction")
    }
    metrics["loss"] = metrics.pop("total")
    return current, metrics


# ---------------------------------------------------------------- training


def episode_record(config_id: str, result: EpisodeResult, **extra) -> dict:
    return {
        "type": "episode",
        **extra,
        "config_id": config_id,
        "reward": result.total_reward,
        "length": result.length,
        "crashed": result.crashed,
        "ttc_near_miss_count": result.risk.ttc_near_miss_count,
        "r_threshold_count": result.risk.r_threshold_count,
    }


@dataclass
class TrainingLog:
    updates: list[dict] = field(default_factory=list)
    episodes: list[dict] = field(default_factory=list)

    def records(self) -> list[dict]:
        """Updates and episodes interleaved in the order they happened."""
        return sorted(self.updates + self.episodes, key=lambda r: r["seq"])

    def write(self, path) -> None:
        with open(path, "w") as fp:
            for rec in self.records():
                fp.write(json.dumps(rec, sort_keys=True) + "\n")


def read_log(path) -> list[dict]:
    with open(path) as fp:
        return [json.loads(line) for line in fp if line.strip()]


class Trainer:
    """Stateful PPO learner; the rollout buffer persists across calls to :meth:`play`."""

    def __init__(self, config: PpoConfig = PpoConfig(), seed: int = 0, params: PolicyParams | None = None,
                 risk_params: RiskParams = RiskParams(), max_steps: int = MAX_EPISODE_STEPS):
        self.config = config
        self.seed = seed
        self.params = params or init_params(hidden_sizes=config.hidden_sizes, seed=seed)
        self.optimizer = Adam(config.learning_rate)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.env = HighwayEnv(risk_params, max_steps)
        self.log = TrainingLog()
        self.steps = 0
        self._seq = 0
        self._buffer: list[tuple] = []
        self._pending: list[dict] = []  # episodes finished since the last update

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def play(self, config: ScenarioConfig, spawn_seed: int | None = None, max_steps: int | None = None,
             **tags) -> EpisodeResult:
        """Run one stochastic training episode, updating whenever the buffer fills.

        ``max_steps`` cuts the episode short (the cut is treated like a time
        limit); extra keyword tags are copied into the episode record.
        """
        obs = self.env.reset(config, spawn_seed)
        done = False
        n = 0
        while not done:
            probs, value = policy_forward(self.params, obs)
            action = int(self.rng.choice(N_ACTIONS, p=probs))
            next_obs, reward, done, _ = self.env.step(action)
            n += 1
            if max_steps is not None and n >= max_steps:
                done = True
            self._buffer.append((obs, action, math.log(probs[action]), reward, done, value))
            self.steps += 1
            obs = next_obs
            if len(self._buffer) >= self.config.steps_per_update:
                last = 0.0 if done else policy_forward(self.params, obs)[1]
                self._update(last)
        result = self.env.result()
        rec = episode_record(config.id, result, seq=self._next_seq(), steps=self.steps, **tags)
        self.log.episodes.append(rec)
        self._pending.append(rec)
        return result

    def _update(self, last_value: float) -> None:
        obs, actions, logp, rewards, dones, values = (np.array(c) for c in zip(*self._buffer))
        adv, ret = compute_gae(rewards, values, dones, last_value, self.config.discount, self.config.gae_lambda)
        batch = RolloutBatch(obs, actions.astype(np.int64), logp, rewards, dones, values, adv, ret)
        self.params, metrics = update(self.params, batch, self.config, self.optimizer, self.rng)
        self._buffer = []
        eps = self._pending
        self.log.updates.append({
            "type": "update",
            "seq": self._next_seq(),
            "update_index": len(self.log.updates),
            "steps": self.steps,
            "mean_reward": float(np.mean([e["reward"] for e in eps])) if eps else None,
            "mean_episode_len": float(np.mean([e["length"] for e in eps])) if eps else None,
            "crash_count": int(sum(e["crashed"] for e in eps)),
            **metrics,
        })
        self._pending = []


def train(
    configs: Sequence[ScenarioConfig],
    config: PpoConfig = PpoConfig(),
    total_steps: int = 100_000,
    seed: int = 0,
    schedule: Callable[[int, np.random.Generator], ScenarioConfig] | None = None,
    risk_params: RiskParams = RiskParams(),
    max_steps: int = MAX_EPISODE_STEPS,
) -> tuple[PolicyParams, TrainingLog]:
    """Train until ``total_steps`` environment steps, one whole episode at a time.

    ``schedule(episode_index, rng)`` picks each episode's configuration; by
    default configurations are drawn uniformly.
    """
    if not configs:
        raise ValueError("configs must be non-empty")
    trainer = Trainer(config, seed, risk_params=risk_params, max_steps=max_steps)
    pick = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    if schedule is None:
        def schedule(i, rng):
            return configs[int(rng.integers(len(configs)))]
    episode = 0
    while trainer.steps < total_steps:
        cfg = schedule(episode, pick)
        trainer.play(cfg, spawn_seed=int(pick.integers(2**31)), episode=episode)
        episode += 1
    return trainer.params, trainer.log


def config_dict(config: PpoConfig) -> dict:
    d = asdict(config)
    d["hidden_sizes"] = list(config.hidden_sizes)
    return d

