"""Criticality bookkeeping and the configuration feedback loop.

After every training epoch the episode rows are folded into one
:class:`CriticalityRecord` per configuration. A configuration is a
*boundary* case when it keeps exceeding the TTC / unified-risk thresholds,
an *edge case* when it is rarely seen yet scores a high criticality, and
*critical* when either holds. Critical configurations seed the next epoch,
verbatim and as offspring (random perturbations or language-model variants).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .llm import (
    VALID,
    HistoryEntry,
    LlmEndpoint,
    PromptContext,
    build_prompt,
    failure_type,
    request_suggestion,
)
from .scenario import DEFAULT_RANGES, ScenarioConfig, ValidRanges, perturb_config, validate_config

log = logging.getLogger(__name__)

DIRECT, LLM = "direct", "llm"
BOUNDARY, EDGE_CASE, BENIGN = "boundary", "edge_case", "benign"


@dataclass(frozen=True)
class GammaWeights:
    ttc: float = 1.0
    r: float = 1.0
    crash: float = 5.0

    def __post_init__(self):
        if min(self.ttc, self.r, self.crash) < 0:
            raise ValueError("criticality weights must be non-negative")


@dataclass(frozen=True)
class CriticalityRecord:
    config_id: str
    episodes_seen: int  # occurrence N, cumulative over epochs
    mean_ttc_near_miss: float
    mean_r_threshold_count: float
    exceedance_fraction: float
    crash_rate: float
    criticality_score: float  # Gamma
    episodes: int = 0  # episodes in the aggregated rows

    def summary(self) -> dict:
        return {
            "episodes": self.episodes,
            "mean_ttc_near_miss": self.mean_ttc_near_miss,
            "mean_r_threshold_count": self.mean_r_threshold_count,
            "crash_rate": self.crash_rate,
            "criticality": self.criticality_score,
        }


def criticality(mean_ttc: float, mean_r: float, crash_rate: float, weights: GammaWeights = GammaWeights()) -> float:
    return weights.ttc * mean_ttc + weights.r * mean_r + weights.crash * crash_rate


def aggregate(
    rows: Iterable[Mapping],
    known_ids: Iterable[str] | None = None,
    weights: GammaWeights = GammaWeights(),
    prior_seen: Mapping[str, int] | None = None,
) -> list[CriticalityRecord]:
    """One record per configuration id, in order of first appearance.

    Rows need ``config_id``, ``ttc_near_miss_count``, ``r_threshold_count``
    and ``crashed``. ``prior_seen`` adds episodes from earlier epochs to the
    occurrence count.
    """
    known = None if known_ids is None else set(known_ids)
    groups: dict[str, list[Mapping]] = {}
    for row in rows:
        cid = row["config_id"]
        if known is not None and cid not in known:
            raise ValueError(f"episode row references unknown configuration {cid!r}")
        groups.setdefault(cid, []).append(row)
    prior_seen = prior_seen or {}
    out = []
    for cid, group in groups.items():
        ttc = np.array([g["ttc_near_miss_count"] for g in group], dtype=float)
        r = np.array([g["r_threshold_count"] for g in group], dtype=float)
        crashed = np.array([bool(g["crashed"]) for g in group])
        m_ttc, m_r, crash_rate = float(ttc.mean()), float(r.mean()), float(crashed.mean())
        out.append(CriticalityRecord(
            config_id=cid,
            episodes_seen=int(prior_seen.get(cid, 0)) + len(group),
            mean_ttc_near_miss=m_ttc,
            mean_r_threshold_count=m_r,
            exceedance_fraction=float(np.mean((ttc > 0) | (r > 0))),
            crash_rate=crash_rate,
            criticality_score=criticality(m_ttc, m_r, crash_rate, weights),
            episodes=len(group),
        ))
    return out


@dataclass(frozen=True)
class Thresholds:
    gamma_threshold: float
    occurrence_threshold: float
    repeat_fraction: float = 0.5

    def __post_init__(self):
        if self.gamma_threshold <= 0 or self.occurrence_threshold <= 0 or self.repeat_fraction <= 0:
            raise ValueError("thresholds must be positive")


GAMMA_FLOOR = 1e-6


def default_thresholds(records: Sequence[CriticalityRecord], percentile: float = 75.0,
                       repeat_fraction: float = 0.5) -> Thresholds:
    """Gamma threshold at a percentile of this epoch's scores, occurrence threshold at the median N."""
    if not records:
        return Thresholds(GAMMA_FLOOR, 1.0, repeat_fraction)
    gamma = float(np.percentile([r.criticality_score for r in records], percentile))
    seen = float(np.median([r.episodes_seen for r in records]))
    return Thresholds(max(gamma, GAMMA_FLOOR), max(seen, 1.0), repeat_fraction)


@dataclass(frozen=True)
class Classification:
    label: str
    boundary: bool
    edge_case: bool

    @property
    def critical(self) -> bool:
        return self.boundary or self.edge_case


def classify(record: CriticalityRecord, thresholds: Thresholds) -> Classification:
    boundary = record.exceedance_fraction >= thresholds.repeat_fraction
    edge = (record.criticality_score >= thresholds.gamma_threshold
            and record.episodes_seen < thresholds.occurrence_threshold)
    label = BOUNDARY if boundary else EDGE_CASE if edge else BENIGN
    return Classification(label, boundary, edge)


# ---------------------------------------------------------------- selection


@dataclass
class Offspring:
    config: ScenarioConfig
    origin: str  # selected | perturbed | llm
    parent: str | None = None
    note: str = ""


def _rank(records, classes):
    by_score = sorted(records, key=lambda r: (-r.criticality_score, r.config_id))
    critical = [r for r in by_score if classes[r.config_id].critical]
    return critical or by_score


def _history(records: Sequence[CriticalityRecord], by_id: Mapping[str, ScenarioConfig]) -> tuple[HistoryEntry, ...]:
    """Most critical last, so the newest-last prompt ends on the strongest examples."""
    ordered = sorted(records, key=lambda r: (r.criticality_score, r.config_id))
    return tuple(
        HistoryEntry(by_id[r.config_id], r.summary(),
                     failure_type(r.crash_rate > 0, r.mean_ttc_near_miss, r.mean_r_threshold_count))
        for r in ordered if r.config_id in by_id
    )


def next_epoch_configs(
    records: Sequence[CriticalityRecord],
    configs: Sequence[ScenarioConfig],
    strategy: str,
    budget: int,
    rng_seed: int,
    llm: LlmEndpoint | None = None,
    thresholds: Thresholds | None = None,
    perturb_scale: float = 0.1,
    ranges: ValidRanges = DEFAULT_RANGES,
    history_limit: int = 10,
    llm_retries: int = 3,
    events: list | None = None,
) -> list[ScenarioConfig]:
    """The next epoch's configurations: half selected verbatim, half offspring.

    Selection takes the highest-criticality critical configurations (all
    configurations when none is critical). Offspring that fail validation or
    duplicate an existing configuration fall back to perturbation.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    if strategy not in (DIRECT, LLM):
        raise ValueError(f"unknown strategy {strategy!r}")
    if (strategy == LLM) != (llm is not None):
        raise ValueError("an llm endpoint is required exactly when strategy is 'llm'")
    by_id = {c.id: c for c in configs}
    records = [r for r in records if r.config_id in by_id]
    if not records:
        raise ValueError("no records for the current configurations")
    thresholds = thresholds or default_thresholds(records)
    classes = {r.config_id: classify(r, thresholds) for r in records}
    ranked = _rank(records, classes)

    n_keep = min((budget + 1) // 2, len(ranked))
    chosen = [by_id[r.config_id] for r in ranked[:n_keep]]
    out = [Offspring(c, "selected") for c in chosen]
    keys = {c.content_key() for c in chosen}
    history = _history(records, by_id) if strategy == LLM else ()
    parents = [by_id[r.config_id] for r in ranked]
    llm_failures = 0

    for i in range(budget - n_keep):
        parent = parents[i % len(parents)]
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, i]))
        child = None
        note = ""
        if strategy == LLM:
            prompt = build_prompt(PromptContext(history, ranges, parent, history_limit=history_limit))
            suggestion = request_suggestion(llm, prompt, retries=llm_retries, base=parent, ranges=ranges)
            if suggestion.validity == VALID and suggestion.config.content_key() not in keys:
                child = Offspring(suggestion.config, "llm", parent.id)
            else:
                llm_failures += 1
                note = suggestion.validity if suggestion.validity != VALID else "duplicate"
                if events is not None:
                    events.append({"event": "llm_fallback", "parent": parent.id, "reason": note,
                                   "diagnostics": suggestion.diagnostics[-3:]})
        while child is None:
            cand = perturb_config(parent, perturb_scale, int(rng.integers(2**31)), ranges)
            if cand.content_key() not in keys:
                child = Offspring(cand, "perturbed", parent.id, note)
        keys.add(child.config.content_key())
        out.append(child)

    if strategy == LLM and budget > n_keep and llm_failures == budget - n_keep:
        log.warning("every language-model request failed this epoch; offspring are perturbations")
        if events is not None:
            events.append({"event": "llm_all_failed", "count": llm_failures})
    if events is not None:
        events.extend({"event": "offspring", "id": o.config.id, "origin": o.origin, "parent": o.parent}
                      for o in out)
    result = [validate_config(o.config, ranges) for o in out]
    assert len(result) == budget
    return result


# ---------------------------------------------------------------- loop


@dataclass
class LoopSettings:
    epochs: int = 5
    episodes_per_config: int = 10
    weights: GammaWeights = GammaWeights()
    percentile: float = 75.0
    repeat_fraction: float = 0.5
    perturb_scale: float = 0.1
    history_limit: int = 10
    llm_retries: int = 3
    total_steps: int | None = None  # training budget; the epoch in progress ends early when spent


@dataclass
class ExperimentLog:
    epochs: list[dict] = field(default_factory=list)

    def records(self) -> list[dict]:
        return [{"type": "epoch", **e} for e in self.epochs]


def epoch_schedule(configs: Sequence[ScenarioConfig], episodes_per_config: int) -> list[ScenarioConfig]:
    """Round-robin episode order over the configurations."""
    return [c for _ in range(episodes_per_config) for c in configs]


def _spawn_seed(seed: int, epoch: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, 7, epoch, episode]).generate_state(1)[0])


def _selection_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 8, epoch]).generate_state(1)[0])


def _mean(values) -> float | None:
    values = list(values)
    return float(np.mean(values)) if values else None


def run_closed_loop(
    initial_configs: Sequence[ScenarioConfig],
    trainer,
    strategy: str | None,
    seed: int = 0,
    settings: LoopSettings = LoopSettings(),
    llm: LlmEndpoint | None = None,
    evaluate: Callable[[int], dict] | None = None,
    ranges: ValidRanges = DEFAULT_RANGES,
):
    """Alternate one training epoch with aggregation, classification and selection.

    ``trainer`` is a :class:`critgen.ppo.Trainer`. ``strategy=None`` keeps the
    configuration set fixed (no selection step). ``evaluate(epoch)`` runs
    after each epoch's training and its result is stored in the log.
    Returns (final params, experiment log).
    """
    if not initial_configs:
        raise ValueError("initial configurations must be non-empty")
    configs = list(initial_configs)
    budget = len(configs)
    seen: dict[str, int] = {}
    exp = ExperimentLog()
    for epoch in range(settings.epochs):
        first = len(trainer.log.episodes)
        first_update = len(trainer.log.updates)
        for k, cfg in enumerate(epoch_schedule(configs, settings.episodes_per_config)):
            if settings.total_steps is not None and trainer.steps >= settings.total_steps:
                break
            trainer.play(cfg, spawn_seed=_spawn_seed(seed, epoch, k), epoch=epoch)
        rows = trainer.log.episodes[first:]
        if not rows:
            break
        updates = trainer.log.updates[first_update:]
        records = aggregate(rows, [c.id for c in configs], settings.weights, seen)
        for r in records:
            seen[r.config_id] = r.episodes_seen
        thresholds = default_thresholds(records, settings.percentile, settings.repeat_fraction)
        classes = {r.config_id: classify(r, thresholds) for r in records}
        entry = {
            "epoch": epoch,
            "configs": [c.to_dict() for c in configs],
            "records": [asdict(r) for r in records],
            "thresholds": asdict(thresholds),
            "classification": {cid: {"label": c.label, "critical": c.critical} for cid, c in classes.items()},
            "training": {
                "episodes": len(rows),
                "steps": trainer.steps,
                "mean_reward": _mean(r["reward"] for r in rows),
                "mean_length": _mean(r["length"] for r in rows),
                "crashes": int(sum(r["crashed"] for r in rows)),
                "updates": len(updates),
                "mean_loss": _mean(u["loss"] for u in updates),
            },
            "selection": None,
        }
        if evaluate is not None:
            entry["evaluation"] = evaluate(epoch)
        if strategy is not None:
            events: list = []
            configs = next_epoch_configs(
                records, configs, strategy, budget, _selection_seed(seed, epoch), llm,
                thresholds, settings.perturb_scale, ranges, settings.history_limit, settings.llm_retries, events,
            )
            entry["selection"] = {"strategy": strategy, "events": events}
        exp.epochs.append(entry)
        if settings.total_steps is not None and trainer.steps >= settings.total_steps:
            break
    return trainer.params, exp

