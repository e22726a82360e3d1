"""Doubling LoRA rank schedule with per-round scoring.

Per concept, every rank starts at 1 and is upscaled to ``min(2 r, tau)``
before each training round of ``epochs_per_round`` epochs. After each round
the scorer (lower is better) runs on the concept's test split. The search
stops after the first round whose score is worse than the previous round's,
or once every rank has reached its threshold. Exact ties continue. The
ranks of the best-scoring round are returned (earliest round on ties).

At least one round always runs, so all-ones thresholds give one round.
Adapters are grown in place between rounds: existing factor slices are kept
and new slices start from the usual A-normal / B-zero initialization.

Across probe concepts the per-concept results are combined by elementwise
maximum into the global rank spec.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from .dataio import Checkpoint, ConceptRecord, models_from_checkpoint
from .errors import SearchError
from .lora import RankSpec, default_thresholds, inject_lora, resize_lora
from .trainer import LossConfig, TrainConfig, discriminator_for, evaluate_l1, generate, train_adapters

__all__ = [
    "SearchConfig",
    "ConceptSearch",
    "rank_schedule_step",
    "aggregate_ranks",
    "max_rounds",
    "search_concept_rank",
    "search_global_rank",
    "scripted_scorer",
    "l1_scorer",
    "fid_scorer",
]

# scorer(adapted_generator, concept, round_index) -> float, lower is better
Scorer = Callable[[object, ConceptRecord, int], float]
# round_trainer(adapted_generator, discriminator, concept, epochs, round_index) -> None
RoundTrainer = Callable[[object, object, ConceptRecord, int, int], None]


def l1_scorer(G, concept: ConceptRecord, round_index: int = 0) -> float:
    """Mean L1 on the concept's test split with fixed noise."""
    return evaluate_l1(G, concept.test, concept.embedding, seed=0)


def fid_scorer(extractor) -> Scorer:
    """Desk-scale Fréchet distance between generated and target test images."""
    from .metrics import fid_score

    def score(G, concept, round_index=0):
        out = generate(G, concept.test.source, concept.embedding, seed=0)
        return fid_score(list(out), list(concept.test.edited), extractor)

    return score


def scripted_scorer(scores: Sequence[float]) -> Scorer:
    """Return the given scores in order, one per round, ignoring the model."""
    scores = list(scores)

    def score(G, concept, round_index):
        if round_index >= len(scores):
            raise SearchError(f"scripted scorer has {len(scores)} scores, round {round_index + 1} requested")
        return float(scores[round_index])

    return score


@dataclass
class SearchConfig:
    epochs_per_round: int = 10
    # None: per-depth defaults for the sampling stacks, 1 for TB layers
    thresholds: Optional[dict] = None
    probe_concepts: list = field(default_factory=list)
    scorer: Union[str, Scorer] = "l1"
    train_config: TrainConfig = field(default_factory=TrainConfig)
    loss_config: LossConfig = field(default_factory=LossConfig)
    # None: train adapters and a fresh discriminator for e epochs per round
    round_trainer: Optional[RoundTrainer] = None
    seed: int = 0
    trace_path: Optional[Path] = None

    def __post_init__(self):
        if self.epochs_per_round < 1:
            raise SearchError(f"epochs_per_round must be >= 1 (got {self.epochs_per_round})")
        if self.thresholds is not None and any(int(t) < 1 for t in self.thresholds.values()):
            raise SearchError("thresholds must be positive")


@dataclass
class ConceptSearch:
    concept: str
    ranks: dict
    best_round: int
    best_score: float
    trace: list


def rank_schedule_step(ranks: dict, thresholds: dict) -> dict:
    """``{i: min(2 r_i, tau_i)}``."""
    if set(ranks) != set(thresholds):
        missing = sorted(set(thresholds) - set(ranks))
        extra = sorted(set(ranks) - set(thresholds))
        raise SearchError(f"rank/threshold key mismatch: missing={missing} extra={extra}")
    for k, r in ranks.items():
        if not 1 <= r <= thresholds[k]:
            raise SearchError(f"rank {r} for {k} is outside [1, {thresholds[k]}]")
    return {k: min(2 * r, thresholds[k]) for k, r in ranks.items()}


def max_rounds(thresholds: dict) -> int:
    """Upper bound on rounds per concept: ``1 + max ceil(log2 tau)``."""
    return 1 + max(math.ceil(math.log2(t)) for t in thresholds.values())


def aggregate_ranks(results: Sequence[dict]) -> dict:
    """Elementwise maximum over per-concept rank maps."""
    if not results:
        raise SearchError("no per-concept ranks to aggregate")
    keys = set(results[0])
    for r in results[1:]:
        if set(r) != keys:
            raise SearchError("per-concept rank maps cover different layers")
    return {k: max(r[k] for r in results) for k in results[0]}


def _resolve_scorer(scorer) -> Scorer:
    if callable(scorer):
        return scorer
    if scorer == "l1":
        return l1_scorer
    if scorer == "fid":
        from .selection import ToyPixelEmbedder

        return fid_scorer(ToyPixelEmbedder())
    raise SearchError(f"unknown scorer {scorer!r}; use 'l1', 'fid' or a callable")


def _default_round_trainer(cfg: SearchConfig) -> RoundTrainer:
    def run(G, D, concept, epochs, round_index):
        train_adapters(G, D, concept, cfg.train_config, epochs, cfg.loss_config,
                       seed=cfg.train_config.seed + round_index)

    return run


def _base_generator(base):
    if isinstance(base, Checkpoint):
        return models_from_checkpoint(base)[0]
    return base


def _append_trace(path, records):
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def search_concept_rank(base, concept: ConceptRecord, cfg: SearchConfig) -> ConceptSearch:
    """Run the doubling schedule for one concept; ``base`` is a Checkpoint or a Generator."""
    G0 = _base_generator(base)
    thresholds = dict(cfg.thresholds) if cfg.thresholds is not None else default_thresholds(G0)
    ranks = {k: 1 for k in thresholds}
    adapted = inject_lora(G0, RankSpec(ranks, thresholds), seed=cfg.seed)
    if cfg.train_config.disable_cross_attention:
        adapted.cross_attention_enabled = False
    D = discriminator_for(G0.config, cfg.train_config, cfg.train_config.seed + 1)
    scorer = _resolve_scorer(cfg.scorer)
    trainer = cfg.round_trainer or _default_round_trainer(cfg)
    trace = []
    prev = math.inf
    best_score, best_ranks, best_round = math.inf, None, 0
    round_index = 0
    while True:
        ranks = rank_schedule_step(ranks, thresholds)
        resize_lora(adapted, ranks, seed=cfg.seed + 1 + round_index)
        try:
            trainer(adapted, D, concept, cfg.epochs_per_round, round_index)
            score = float(scorer(adapted, concept, round_index))
        except SearchError:
            raise
        except Exception as exc:
            raise SearchError(
                f"rank search for concept {concept.name!r} failed in round {round_index + 1} "
                f"with ranks {ranks}: {exc}"
            ) from exc
        if not math.isfinite(score):
            raise SearchError(f"non-finite score {score} for concept {concept.name!r} in round {round_index + 1}")
        trace.append({"concept": concept.name, "round": round_index + 1, "ranks": dict(ranks), "score": score})
        if score < best_score:
            best_score, best_ranks, best_round = score, dict(ranks), round_index + 1
        round_index += 1
        saturated = all(ranks[k] >= thresholds[k] for k in ranks)
        if score > prev or saturated:
            break
        prev = score
    return ConceptSearch(concept.name, best_ranks, best_round, best_score, trace)


def search_global_rank(base, cfg: SearchConfig) -> RankSpec:
    """Search every probe concept and combine the results by elementwise maximum."""
    if not cfg.probe_concepts:
        raise SearchError("search_global_rank needs at least one probe concept")
    G0 = _base_generator(base)
    thresholds = dict(cfg.thresholds) if cfg.thresholds is not None else default_thresholds(G0)
    results = []
    for concept in cfg.probe_concepts:
        try:
            res = search_concept_rank(G0, concept, cfg)
        except SearchError as exc:
            raise SearchError(f"concept {concept.name!r}: {exc}") from exc
        _append_trace(cfg.trace_path, res.trace)
        results.append(res.ranks)
    return RankSpec(aggregate_ranks(results), thresholds)
