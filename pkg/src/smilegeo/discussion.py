"""The three-stage review protocol.

Stage 1 elects answer agents and collects their placements. Stage 2 walks
the collaboration graph to pick reviewers for each answer and lets every
answerer fold the reviews into a summary. Stage 3 runs up to ``z`` rounds of
free discussion among the answerers and concludes by proximity clusters.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal, Sequence

from ._rng import derive_seed, keyed_rng
from .agents import AgentUnavailable, ImageRef, LocationAnswer, ReviewComment, Utterance
from .errors import PipelineFailed, ValidationError
from .geo import CITY_LEVEL_KM, Gazetteer, cluster_by_proximity
from .graph import CollaborationGraph, ElectionVector, elect, select_reviewers

DEFAULT_IMAGE_TOKENS = 1000
CHARS_PER_TOKEN = 4

PROMPTS = {
    "answer": (
        "Where was this photo taken? Answer in three parts: location (city, country and so on), "
        "confidence as a percentage, and a detailed explanation. You may search the web and reason step by step."
    ),
    "review": (
        "Another agent geo-localized this photo as below. Review the location and its explanation, "
        "then give your own comment and a confidence percentage.\n\n{context}"
    ),
    "summarize": (
        "Below are your preliminary analysis and the reviews it received. Summarize them into a final "
        "answer with location, confidence and explanation.\n\n{context}"
    ),
    "discuss": (
        "The latest replies in the discussion are below. Speak once: give your location, confidence "
        "and explanation.\n\n{context}"
    ),
}


@dataclass
class DiscussionConfig:
    k: int = 2
    r: int = 2
    z: int = 10
    th: float = CITY_LEVEL_KM
    retrieval_enabled: bool = False
    image_token_constant: int = DEFAULT_IMAGE_TOKENS
    # freshest responses forwarded into a discussion prompt
    max_context: int = 8
    max_workers: int = 1

    def __post_init__(self):
        if self.k < 1 or self.r < 0 or self.z < 1 or not self.th > 0:
            raise ValidationError(f"invalid discussion config k={self.k} r={self.r} z={self.z} th={self.th}")
        if self.max_context < 1 or self.max_workers < 1:
            raise ValidationError("max_context and max_workers must be positive")


@dataclass(frozen=True)
class Message:
    """One prompt or reply as sent over the wire; `images` counts attached images."""

    text: str
    images: int = 0


def account_tokens(transcript: Sequence[Message], image_token_constant: int = DEFAULT_IMAGE_TOKENS) -> int:
    return sum(math.ceil(len(m.text) / CHARS_PER_TOKEN) + image_token_constant * m.images for m in transcript)


class DialogHistory:
    """Append-only, totally ordered discussion log; one utterance per speaker per round."""

    def __init__(self):
        self._entries: list[Utterance] = []
        self._spoken: set[tuple[int, int]] = set()

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    @property
    def entries(self) -> tuple[Utterance, ...]:
        return tuple(self._entries)

    def append(self, round: int, speaker, answer: LocationAnswer) -> Utterance:
        key = (round, speaker.index)
        if key in self._spoken:
            raise ValidationError(f"agent {speaker.index} already spoke in round {round}")
        if self._entries and round < self._entries[-1].round:
            raise ValidationError("dialog rounds cannot go backwards")
        u = Utterance(len(self._entries) + 1, round, speaker, answer)
        self._entries.append(u)
        self._spoken.add(key)
        return u


class AuditLog:
    """Run events plus the wire transcript used for token accounting."""

    def __init__(self):
        self.events: list[dict] = []
        self.transcript: list[Message] = []

    def emit(self, stage: str, agent: int | None, kind: str, payload: dict | None = None) -> None:
        self.events.append({"seq": len(self.events) + 1, "stage": stage, "agent": agent, "kind": kind,
                            "payload": payload or {}})

    def exchange(self, prompt: str, reply: str, images: int) -> None:
        self.transcript.append(Message(prompt, images))
        self.transcript.append(Message(reply, 0))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


@dataclass
class Verdict:
    answer: LocationAnswer
    consensus: bool
    rounds_used: int
    fallback_used: bool
    agent_calls: int
    tokens_estimate: int
    elapsed_ms: int
    elected: list[int] = field(default_factory=list)
    # answerers that actually answered, in election order
    participants: list[int] = field(default_factory=list)
    reviewers: dict[int, list[int]] = field(default_factory=dict)
    summaries: dict[int, LocationAnswer] = field(default_factory=dict)
    final_answers: dict[int, LocationAnswer] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["answer"] = self.answer.to_dict()
        for key in ("summaries", "final_answers"):
            d[key] = {str(i): a.to_dict() for i, a in getattr(self, key).items()}
        d["reviewers"] = {str(i): v for i, v in self.reviewers.items()}
        return d


@dataclass
class _Run:
    """Mutable per-run state shared by the stages."""

    image: ImageRef
    roster: Sequence
    cfg: DiscussionConfig
    episode: int
    log: AuditLog
    calls: int = 0

    def prompt(self, role: str, context: Sequence[str] = ()) -> str:
        return PROMPTS[role].format(context="\n\n".join(context))

    def call(self, stage: str, role: str, agent_index: int, fn: Callable, context: Sequence[str], images: int):
        """Invoke one agent behaviour; None when the agent is unavailable."""
        prompt = self.prompt(role, context)
        try:
            out = fn(prompt)
        except AgentUnavailable as exc:
            self.log.emit(stage, agent_index, "unavailable", {"role": role, "error": str(exc)})
            return None
        reply = out.render()
        self.calls += 1
        self.log.exchange(prompt, reply, images)
        self.log.emit(stage, agent_index, role, {"reply": reply})
        return out


def _check_roster(roster: Sequence, n: int) -> None:
    if not roster:
        raise ValidationError("roster is empty")
    if [a.id.index for a in roster] != list(range(len(roster))):
        raise ValidationError("roster indices must be 0..N-1 in order")
    if n != len(roster):
        raise ValidationError(f"election/graph sized {n} for a roster of {len(roster)}")


def _map(cfg: DiscussionConfig, fn: Callable, items: Sequence) -> list:
    if cfg.max_workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _freshest(latest: dict[int, Utterance], limit: int) -> list[str]:
    recent = sorted(latest.values(), key=lambda u: u.seq, reverse=True)[:limit]
    return [f"[agent {u.speaker.index}] {u.answer.render()}" for u in reversed(recent)]


def run_pipeline(
    image: ImageRef,
    roster: Sequence,
    lst: ElectionVector,
    g: CollaborationGraph,
    cfg: DiscussionConfig,
    mode: Literal["topk", "bernoulli"] = "topk",
    rng_seed: int = 0,
    *,
    gazetteer: Gazetteer,
    log: AuditLog | None = None,
) -> Verdict:
    """Run all three stages for one image and return the verdict with its accounting."""
    started = time.perf_counter_ns()
    _check_roster(roster, lst.n)
    if g.n != lst.n:
        raise ValidationError("graph and election vector disagree on roster size")
    if cfg.r > len(roster) - 1:
        raise ValidationError(f"r={cfg.r} reviewers need at least {cfg.r + 1} agents")
    run = _Run(image, roster, cfg, rng_seed, log if log is not None else AuditLog())

    k = min(cfg.k, lst.n)
    elected = elect(lst, k, mode, keyed_rng("elect", rng_seed, image.id))
    run.log.emit("election", None, "elected", {"agents": elected, "mode": mode})

    # Stage 1
    def ask(i: int):
        agent = roster[i]
        return run.call("answer", "answer", i,
                        lambda prompt: agent.answer(image, cfg.retrieval_enabled, episode=rng_seed, context=[prompt]),
                        (), images=1)

    first = _map(cfg, ask, elected)
    answers = {i: a for i, a in zip(elected, first) if a is not None}
    participants = [i for i in elected if i in answers]
    if not participants:
        raise PipelineFailed(f"no elected agent answered image {image.id}")

    # Stage 2
    reviewers: dict[int, list[int]] = {}
    for i in participants:
        info: dict = {}
        reviewers[i] = select_reviewers(g, i, cfg.r, keyed_rng("walk", rng_seed, image.id, i), walk_info=info)
        run.log.emit("review", i, "walk", {"reviewers": reviewers[i], "steps": info["steps"],
                                           "fallback": info["fallback"]})

    def critique(pair: tuple[int, int]):
        i, j = pair
        subject = answers[i]
        return run.call("review", "review", j,
                        lambda prompt: roster[j].review(image, subject, cfg.retrieval_enabled,
                                                        episode=rng_seed, context=[prompt]),
                        [subject.render()], images=1)

    pairs = [(i, j) for i in participants for j in reviewers[i]]
    comments: dict[int, list[ReviewComment]] = {i: [] for i in participants}
    for (i, _), c in zip(pairs, _map(cfg, critique, pairs)):
        if c is not None:
            comments[i].append(c)

    summaries: dict[int, LocationAnswer] = {}
    for i in participants:
        own, notes = answers[i], comments[i]
        context = [own.render()] + [c.render() for c in notes]
        out = run.call("summarize", "summarize", i,
                       lambda prompt: roster[i].summarize(own, notes, image=image, episode=rng_seed,
                                                          context=[prompt]),
                       context, images=0)
        summaries[i] = out if out is not None else own

    # Stage 3
    verdict = conclude(summaries, participants, cfg, DialogHistory(), rng_seed,
                       roster=roster, gazetteer=gazetteer, image=image, run=run)
    verdict.elected = elected
    verdict.reviewers = reviewers
    verdict.summaries = summaries
    verdict.tokens_estimate = account_tokens(run.log.transcript, cfg.image_token_constant)
    verdict.elapsed_ms = (time.perf_counter_ns() - started) // 1_000_000
    run.log.emit("verdict", None, "verdict", {k: v for k, v in verdict.to_dict().items() if k != "elapsed_ms"})
    return verdict


def _pick(members: Sequence[int], latest: dict[int, LocationAnswer], seq_of: dict[int, int]) -> int:
    """Highest-confidence member; ties go to the earliest utterance."""
    return min(members, key=lambda i: (-latest[i].confidence_pct, seq_of.get(i, math.inf)))


def tally(latest: dict[int, LocationAnswer], order: Sequence[int], gazetteer: Gazetteer, th: float) -> list[list[int]]:
    """Proximity clusters over the current positions, as lists of agent indices."""
    groups = cluster_by_proximity([latest[i].location_text for i in order], gazetteer, th)
    return [[order[p] for p in grp] for grp in groups]


def conclude(
    answers: dict[int, LocationAnswer],
    order: Sequence[int],
    cfg: DiscussionConfig,
    dialog: DialogHistory,
    rng_seed: int = 0,
    *,
    roster: Sequence,
    gazetteer: Gazetteer,
    image: ImageRef,
    run: _Run | None = None,
) -> Verdict:
    """Free discussion among the answerers, then a cluster-majority conclusion.

    `order` is the election order of the answerers; its head is the fallback
    speaker. Each round schedules the speakers in a seeded order and each
    one reads the dialog as it stands at its turn. The stage stops early once
    one cluster holds a strict majority of the answerers.
    """
    if not order:
        raise ValidationError("conclusion needs at least one answer")
    run = run or _Run(image, roster, cfg, rng_seed, AuditLog())
    latest = dict(answers)
    seq_of: dict[int, int] = {}
    latest_utt: dict[int, Utterance] = {}
    half = len(order) / 2

    def finish(winner: int, consensus: bool, rounds: int, fallback: bool) -> Verdict:
        run.log.emit("conclusion", winner, "conclude",
                     {"consensus": consensus, "rounds_used": rounds, "fallback": fallback})
        return Verdict(latest[winner], consensus, rounds, fallback, run.calls, 0, 0,
                       participants=list(order), final_answers=dict(latest))

    clusters: list[list[int]] = []
    for rnd in range(1, cfg.z + 1):
        schedule = [order[p] for p in keyed_rng("schedule", rng_seed, image.id, rnd).permutation(len(order))]
        for i in schedule:
            agent, own = roster[i], latest[i]
            snapshot = dialog.entries
            context = _freshest({s: u for s, u in latest_utt.items() if s != i}, cfg.max_context)
            reply = run.call("discussion", "discuss", i,
                             lambda prompt: agent.discuss(snapshot, own, image=image, round=rnd,
                                                          episode=rng_seed, context=[prompt]),
                             context, images=0)
            if reply is None:
                continue
            u = dialog.append(rnd, agent.id, reply)
            latest[i], seq_of[i], latest_utt[i] = reply, u.seq, u
        clusters = tally(latest, order, gazetteer, cfg.th)
        biggest = max(clusters, key=len)
        run.log.emit("discussion", None, "round", {"round": rnd, "clusters": clusters})
        if len(biggest) > half:
            return finish(_pick(biggest, latest, seq_of), True, rnd, False)

    if all(len(c) == 1 for c in clusters):
        return finish(order[0], False, cfg.z, True)
    size = max(len(c) for c in clusters)
    tied = [c for c in clusters if len(c) == size]
    best = next((c for c in tied if order[0] in c), tied[0])
    return finish(_pick(best, latest, seq_of), False, cfg.z, False)


def run_debate(
    image: ImageRef,
    roster: Sequence,
    cfg: DiscussionConfig,
    rng_seed: int = 0,
    *,
    gazetteer: Gazetteer,
    log: AuditLog | None = None,
) -> Verdict:
    """All-agents debate baseline: every agent speaks in each of ``z`` rounds.

    No election, no reviewers, no early stop; the image accompanies every
    turn. Round 1 is a plain answer, later rounds are discussion turns over
    the freshest replies.
    """
    started = time.perf_counter_ns()
    _check_roster(roster, len(roster))
    run = _Run(image, roster, cfg, rng_seed, log if log is not None else AuditLog())
    order = list(range(len(roster)))
    latest: dict[int, LocationAnswer] = {}
    latest_utt: dict[int, Utterance] = {}
    seq_of: dict[int, int] = {}
    dialog = DialogHistory()
    for rnd in range(1, cfg.z + 1):
        for i in order:
            agent = roster[i]
            if rnd == 1:
                reply = run.call("debate", "answer", i,
                                 lambda prompt: agent.answer(image, cfg.retrieval_enabled, episode=rng_seed,
                                                             context=[prompt]),
                                 (), images=1)
            elif i in latest:
                snapshot, own = dialog.entries, latest[i]
                context = _freshest({s: u for s, u in latest_utt.items() if s != i}, cfg.max_context)
                reply = run.call("debate", "discuss", i,
                                 lambda prompt: agent.discuss(snapshot, own, image=image, round=rnd,
                                                              episode=rng_seed, context=[prompt]),
                                 context, images=1)
            else:
                continue
            if reply is not None:
                u = dialog.append(rnd, agent.id, reply)
                latest[i], seq_of[i], latest_utt[i] = reply, u.seq, u
    speakers = [i for i in order if i in latest]
    if not speakers:
        raise PipelineFailed(f"no agent answered image {image.id}")
    clusters = tally(latest, speakers, gazetteer, cfg.th)
    size = max(len(c) for c in clusters)
    if size == 1:
        winner, fallback = speakers[0], True
    else:
        winner, fallback = _pick(next(c for c in clusters if len(c) == size), latest, seq_of), False
    return Verdict(latest[winner], size > len(speakers) / 2, cfg.z, fallback, run.calls,
                   account_tokens(run.log.transcript, cfg.image_token_constant),
                   (time.perf_counter_ns() - started) // 1_000_000,
                   elected=order, participants=speakers, final_answers=dict(latest))


def sample_seed(run_seed: int, sample_id: str) -> int:
    """Per-sample stream so samples can be processed in any order."""
    return derive_seed("sample", run_seed, sample_id)
