"""End-to-end runs: evaluation reports, solo baselines and training from a world."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from ..discussion import DiscussionConfig, run_debate, run_pipeline, sample_seed
from ..errors import PipelineFailed, ValidationError
from ..geo import Gazetteer, coverage_consistency, score
from ..graph import CollaborationGraph, ElectionVector, elect
from ..learn import (SeedFeatureExtractor, SelectionModel, TrainConfig, TrainResult, TrainingSample,
                     estimate_targets, forward, train)
from .data import DatasetRecord

log = logging.getLogger(__name__)

TIMING_NOTE = ("response times cover orchestration and simulated or remote agent latency only; "
               "they are not comparable to hosted-model timings")
# keys that vary between otherwise identical runs
TIMING_KEYS = ("elapsed_ms", "rt_avg_ms", "rt_med_ms")


@dataclass
class RunReport:
    accuracy: float
    avg_tokens: float
    avg_calls: float
    rt_avg_ms: float
    rt_med_ms: float
    n_samples: int
    n_failed: int
    mode: str
    verdicts: list[dict]
    config: dict
    coverage: float | None = None
    consistency: float | None = None
    notes: list[str] = field(default_factory=lambda: [TIMING_NOTE])

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError(f"accuracy {self.accuracy} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        missing = set(cls.__dataclass_fields__) - set(d) - {"coverage", "consistency", "notes"}
        if missing:
            raise ValidationError(f"report lacks {sorted(missing)}")
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValidationError(f"{path}: not a run report ({exc})") from None


def without_timing(obj):
    """A copy of a report dict with wall-clock fields removed, for comparisons."""
    if isinstance(obj, dict):
        return {k: without_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [without_timing(v) for v in obj]
    return obj


def nearest_rank_median(values: Sequence[float]) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    return float(ordered[math.ceil(0.5 * len(ordered)) - 1])


def _selection(model: SelectionModel | None, record: DatasetRecord, n: int, extractor):
    if model is None:
        return ElectionVector.uniform(n), CollaborationGraph.fully_connected(n)
    if model.n != n:
        raise ValidationError(f"model trained for {model.n} agents, roster has {n}")
    a, lst = forward(model, extractor(record.to_image()))
    return ElectionVector(lst), CollaborationGraph(a)


def evaluate(
    cfg: DiscussionConfig,
    roster: Sequence,
    dataset: Sequence[DatasetRecord],
    *,
    gazetteer: Gazetteer,
    seed: int = 0,
    model: SelectionModel | None = None,
    mode: Literal["pipeline", "debate"] = "pipeline",
    train_records: Sequence[DatasetRecord] | None = None,
    config_echo: dict | None = None,
) -> RunReport:
    """Run every record through the protocol (or the debate baseline) and score it.

    Without a model every agent gets election probability 0.5 and the graph
    is the unit graph, so election is top-k by index. A sample whose pipeline
    fails is scored incorrect and flagged.
    """
    if mode not in ("pipeline", "debate"):
        raise ValidationError(f"unknown evaluation mode {mode!r}")
    n = len(roster)
    extractor = SeedFeatureExtractor(model.d_k) if model is not None else None

    def one(record: DatasetRecord) -> dict:
        rng_seed = sample_seed(seed, record.id)
        image = record.to_image()
        started = time.perf_counter_ns()
        try:
            if mode == "debate":
                verdict = run_debate(image, roster, cfg, rng_seed, gazetteer=gazetteer)
            else:
                lst, g = _selection(model, record, n, extractor)
                verdict = run_pipeline(image, roster, lst, g, cfg, "topk", rng_seed, gazetteer=gazetteer)
        except PipelineFailed as exc:
            log.warning("sample %s failed: %s", record.id, exc)
            return {"id": record.id, "correct": False, "failed": True, "error": str(exc),
                    "distance_km": None, "agent_calls": 0, "tokens_estimate": 0,
                    "elapsed_ms": (time.perf_counter_ns() - started) / 1e6}
        outcome = score(record.id, verdict.answer.location_text, record.truth_box, gazetteer, cfg.th)
        return {"id": record.id, "correct": outcome.correct, "failed": False, "distance_km": outcome.distance_km,
                "answer": verdict.answer.to_dict(), "consensus": verdict.consensus,
                "rounds_used": verdict.rounds_used, "fallback_used": verdict.fallback_used,
                "agent_calls": verdict.agent_calls, "tokens_estimate": verdict.tokens_estimate,
                "elected": list(verdict.elected), "participants": list(verdict.participants),
                "elapsed_ms": (time.perf_counter_ns() - started) / 1e6}

    if cfg.max_workers > 1:
        with ThreadPoolExecutor(cfg.max_workers) as pool:
            rows = list(pool.map(one, dataset))
    else:
        rows = [one(r) for r in dataset]

    count = len(rows)
    times = [r["elapsed_ms"] for r in rows]
    coverage = consistency = None
    if train_records and dataset:
        coverage, consistency = coverage_consistency([r.truth_text for r in train_records],
                                                     [r.truth_text for r in dataset])
    return RunReport(
        accuracy=sum(r["correct"] for r in rows) / count if count else 0.0,
        avg_tokens=sum(r["tokens_estimate"] for r in rows) / count if count else 0.0,
        avg_calls=sum(r["agent_calls"] for r in rows) / count if count else 0.0,
        rt_avg_ms=float(np.mean(times)) if times else 0.0,
        rt_med_ms=nearest_rank_median(times),
        n_samples=count, n_failed=sum(r["failed"] for r in rows), mode=mode, verdicts=rows,
        config=config_echo if config_echo is not None else {"discussion": asdict(cfg), "seed": seed},
        coverage=coverage, consistency=consistency,
    )


def solo_accuracies(roster: Sequence, dataset: Sequence[DatasetRecord], *, gazetteer: Gazetteer,
                    th: float, seed: int = 0, retrieval_enabled: bool = False) -> list[float]:
    """Each agent answering every image alone, with no review or discussion."""
    if not dataset:
        raise ValidationError("solo accuracy needs at least one record")
    out = []
    for agent in roster:
        hits = 0
        for rec in dataset:
            ans = agent.answer(rec.to_image(), retrieval_enabled, episode=sample_seed(seed, rec.id))
            hits += score(rec.id, ans.location_text, rec.truth_box, gazetteer, th).correct
        out.append(hits / len(dataset))
    return out


def specialist_rate(model: SelectionModel, dataset: Sequence[DatasetRecord], profiles: Sequence, k: int) -> float:
    """Share of images whose top-k election includes an agent at home in the image's region."""
    if not dataset:
        raise ValidationError("specialist rate needs at least one record")
    extractor = SeedFeatureExtractor(model.d_k)
    hits = 0
    for rec in dataset:
        _, lst = forward(model, extractor(rec.to_image()))
        top = elect(ElectionVector(lst), min(k, model.n))
        hits += any(rec.region_key in profiles[i].home_regions for i in top)
    return hits / len(dataset)


def training_samples(records: Sequence[DatasetRecord], roster: Sequence, tcfg: TrainConfig,
                     dcfg: DiscussionConfig, *, gazetteer: Gazetteer, seed: int = 0) -> list[TrainingSample]:
    extractor = SeedFeatureExtractor(tcfg.d_k)
    return [TrainingSample(rec.id, extractor(rec.to_image()),
                           estimate_targets(rec.to_image(), rec.truth_box, roster, tcfg, dcfg,
                                            sample_seed(seed, rec.id), gazetteer=gazetteer))
            for rec in records]


def fit(records: Sequence[DatasetRecord], roster: Sequence, tcfg: TrainConfig, dcfg: DiscussionConfig, *,
        gazetteer: Gazetteer, seed: int = 0, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Estimate targets for every training record, then train a fresh model on them."""
    samples = training_samples(records, roster, tcfg, dcfg, gazetteer=gazetteer, seed=seed)
    model = SelectionModel.init(len(roster), tcfg.d_k, tcfg.d_h, seed=tcfg.seed)
    return train(model, samples, tcfg, k=dcfg.k, th=dcfg.th, on_epoch=on_epoch)
