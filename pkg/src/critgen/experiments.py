"""Training arms and greedy evaluation.

Three arms share one epoch structure: ``baseline`` trains on a fixed set of
configurations, ``critical`` refreshes the set each epoch from criticality
statistics by perturbation, and ``llm`` does the same with language-model
suggestions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .llm import LlmEndpoint
from .loop import DIRECT, LLM, ExperimentLog, GammaWeights, LoopSettings, run_closed_loop
from .ppo import PolicyParams, PpoConfig, Trainer, TrainingLog, episode_record, policy_forward
from .risk import RiskParams
from .scenario import ScenarioConfig
from .traffic import MAX_EPISODE_STEPS, run_episode

ARMS = ("baseline", "critical", "llm")
STRATEGY = {"baseline": None, "critical": DIRECT, "llm": LLM}


@dataclass(frozen=True)
class RunSettings:
    """Everything a training run needs besides the data; stored in every log."""

    epochs: int = 5
    episodes_per_config: int = 10
    total_steps: int | None = None
    eval_runs: int = 10
    max_steps: int = MAX_EPISODE_STEPS
    ppo: PpoConfig = PpoConfig()
    weights: GammaWeights = GammaWeights()
    percentile: float = 75.0
    repeat_fraction: float = 0.5
    perturb_scale: float = 0.1
    history_limit: int = 10
    llm_retries: int = 3
    evaluate_each_epoch: bool = True

    def loop(self) -> LoopSettings:
        return LoopSettings(self.epochs, self.episodes_per_config, self.weights, self.percentile,
                            self.repeat_fraction, self.perturb_scale, self.history_limit, self.llm_retries,
                            self.total_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ppo"]["hidden_sizes"] = list(self.ppo.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> RunSettings:
        data = dict(data)
        if "ppo" in data:
            data["ppo"] = PpoConfig.from_dict(data["ppo"])
        if "weights" in data:
            data["weights"] = GammaWeights(**data["weights"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown run settings: {sorted(unknown)}")
        return cls(**data)


def greedy(params: PolicyParams):
    return lambda obs: int(np.argmax(policy_forward(params, obs)[0]))


def eval_seed(seed: int, config_index: int, run: int) -> int:
    return int(np.random.SeedSequence([seed, 11, config_index, run]).generate_state(1)[0])


@dataclass
class Evaluation:
    rows: list[dict]

    @property
    def mean_reward(self) -> float:
        return float(np.mean([r["reward"] for r in self.rows]))

    @property
    def mean_length(self) -> float:
        return float(np.mean([r["length"] for r in self.rows]))

    @property
    def crashes(self) -> int:
        return int(sum(r["crashed"] for r in self.rows))

    @property
    def mean_r_threshold_count(self) -> float:
        return float(np.mean([r["r_threshold_count"] for r in self.rows]))

    @property
    def mean_ttc_near_miss(self) -> float:
        return float(np.mean([r["ttc_near_miss_count"] for r in self.rows]))

    def per_config(self) -> list[dict]:
        out = {}
        for r in self.rows:
            out.setdefault(r["config_id"], []).append(r)
        return [
            {"config_id": cid, "episodes": len(rs),
             "mean_reward": float(np.mean([r["reward"] for r in rs])),
             "mean_length": float(np.mean([r["length"] for r in rs])),
             "crashes": int(sum(r["crashed"] for r in rs))}
            for cid, rs in out.items()
        ]

    def summary(self) -> dict:
        return {
            "episodes": len(self.rows),
            "mean_reward": self.mean_reward,
            "mean_length": self.mean_length,
            "crashes": self.crashes,
            "mean_ttc_near_miss": self.mean_ttc_near_miss,
            "mean_r_threshold_count": self.mean_r_threshold_count,
        }


def evaluate(params: PolicyParams, configs: Sequence[ScenarioConfig], runs: int = 10, seed: int = 0,
             max_steps: int = MAX_EPISODE_STEPS, risk_params: RiskParams = RiskParams()) -> Evaluation:
    """Greedy rollouts, ``runs`` per configuration, each run with its own spawn seed."""
    policy = greedy(params)
    rows = []
    for ci, cfg in enumerate(configs):
        for run in range(runs):
            result = run_episode(cfg, policy, max_steps, eval_seed(seed, ci, run), risk_params)
            rows.append(episode_record(cfg.id, result, run=run))
    return Evaluation(rows)


@dataclass
class ArmResult:
    arm: str
    seed: int
    params: PolicyParams
    training: TrainingLog
    experiment: ExperimentLog
    evaluation: Evaluation | None = None
    header: dict = field(default_factory=dict)

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "training": out / f"{self.arm}_training.jsonl",
            "experiment": out / f"{self.arm}_experiment.jsonl",
            "params": out / f"{self.arm}_policy.npz",
        }
        self.training.write(paths["training"])
        with open(paths["experiment"], "w") as fp:
            fp.write(json.dumps({"type": "run", **self.header}, sort_keys=True) + "\n")
            for rec in self.experiment.records():
                fp.write(json.dumps(rec, sort_keys=True) + "\n")
        self.params.save(paths["params"])
        if self.evaluation is not None:
            paths["evaluation"] = out / f"{self.arm}_evaluation.jsonl"
            with open(paths["evaluation"], "w") as fp:
                for row in self.evaluation.rows:
                    fp.write(json.dumps(row, sort_keys=True) + "\n")
        return paths


def run_arm(
    arm: str,
    train_configs: Sequence[ScenarioConfig],
    test_configs: Sequence[ScenarioConfig] = (),
    settings: RunSettings = RunSettings(),
    seed: int = 0,
    llm: LlmEndpoint | None = None,
    risk_params: RiskParams = RiskParams(),
) -> ArmResult:
    """Train one arm and evaluate it on the test configurations after every epoch."""
    if arm not in ARMS:
        raise ValueError(f"arm must be one of {ARMS}, got {arm!r}")
    if arm == "llm" and llm is None:
        raise ValueError("the llm arm needs an endpoint")
    trainer = Trainer(settings.ppo, seed, risk_params=risk_params, max_steps=settings.max_steps)
    per_epoch = None
    if test_configs and settings.evaluate_each_epoch:
        def per_epoch(epoch):
            return evaluate(trainer.params, test_configs, settings.eval_runs, seed, settings.max_steps,
                            risk_params).summary()
    params, exp = run_closed_loop(train_configs, trainer, STRATEGY[arm], seed, settings.loop(),
                                  llm if arm == "llm" else None, per_epoch)
    final = evaluate(params, test_configs, settings.eval_runs, seed, settings.max_steps, risk_params) \
        if test_configs else None
    header = {
        "arm": arm,
        "seed": seed,
        "loop": STRATEGY[arm] is not None,
        "strategy": STRATEGY[arm],
        "settings": settings.to_dict(),
        "train_configs": [c.id for c in train_configs],
        "test_configs": [c.id for c in test_configs],
    }
    if final is not None:
        header["evaluation"] = final.summary()
    return ArmResult(arm, seed, params, trainer.log, exp, final, header)
