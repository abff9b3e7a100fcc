"""The agent collaboration network and the election vector.

Edge weights decide who reviews whom (row-normalised into random-walk step
probabilities) and are re-weighted after each outcome by a streak-attenuated
multiplicative rule. Election probabilities decide who answers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from ._rng import as_rng
from .errors import DegenerateRow, ValidationError

log = logging.getLogger(__name__)

WALK_STEPS_PER_REVIEWER = 50


@dataclass
class CollaborationGraph:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError(f"adjacency must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValidationError("adjacency weights must be finite and non-negative")
        if np.any(np.diag(w) != 0):
            raise ValidationError("adjacency must have a zero diagonal")
        self.weights = w

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def fully_connected(cls, n: int) -> "CollaborationGraph":
        if n < 1:
            raise ValidationError("graph needs at least one agent")
        return cls(np.ones((n, n)) - np.eye(n))

    def copy(self) -> "CollaborationGraph":
        return CollaborationGraph(self.weights.copy())

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "weights": self.weights.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "CollaborationGraph":
        obj = json.loads(text)
        g = cls(np.array(obj["weights"], dtype=np.float64).reshape(obj["n"], obj["n"]))
        return g


@dataclass
class StreakState:
    """Per-agent run lengths of consecutive correct / incorrect outcomes."""

    correct_run: np.ndarray
    incorrect_run: np.ndarray

    @classmethod
    def fresh(cls, n: int) -> "StreakState":
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))

    def advance(self, agent: int, correct: bool) -> int:
        """Record one outcome and return the length of the run it extends."""
        if correct:
            self.correct_run[agent] += 1
            self.incorrect_run[agent] = 0
            return int(self.correct_run[agent])
        self.incorrect_run[agent] += 1
        self.correct_run[agent] = 0
        return int(self.incorrect_run[agent])


def transfer_probability(g: CollaborationGraph, i: int, j: int) -> float:
    if i == j:
        raise ValidationError("transfer probability is defined between distinct agents")
    row = g.weights[i]
    total = row.sum()
    if total <= 0:
        raise DegenerateRow(f"agent {i} has no outgoing edges")
    return float(row[j] / total)


def transfer_row(g: CollaborationGraph, i: int) -> np.ndarray:
    """Step distribution out of agent i; uniform over the others when the row is empty."""
    row = g.weights[i]
    total = row.sum()
    if total <= 0:
        if g.n == 1:
            raise DegenerateRow("a single agent has nowhere to walk")
        p = np.ones(g.n)
        p[i] = 0.0
        return p / p.sum()
    return row / total


def select_reviewers(
    g: CollaborationGraph,
    start: int,
    r: int,
    rng_seed: int | np.random.Generator | None = None,
    *,
    walk_info: dict | None = None,
) -> list[int]:
    """Collect r distinct reviewers for `start` by a weighted random walk.

    Each step is drawn from the transfer distribution of the current node.
    If the walk has not found r distinct agents after 50*r steps, the
    remaining slots go to the heaviest unvisited neighbours of `start`
    (lower index on ties) and ``walk_info["fallback"]`` is set.
    """
    if r < 0 or r > g.n - 1:
        raise ValidationError(f"cannot pick {r} reviewers from {g.n - 1} candidates")
    rng = as_rng(rng_seed)
    chosen: list[int] = []
    current, steps = start, 0
    while len(chosen) < r and steps < WALK_STEPS_PER_REVIEWER * r:
        nxt = int(rng.choice(g.n, p=transfer_row(g, current)))
        steps += 1
        if nxt != start and nxt not in chosen:
            chosen.append(nxt)
        current = nxt
    fallback = len(chosen) < r
    if fallback:
        log.warning("reviewer walk from agent %d stalled after %d steps; filling by weight", start, steps)
        rest = [j for j in range(g.n) if j != start and j not in chosen]
        order = sorted(rest, key=lambda j: (-g.weights[start, j], j))
        chosen.extend(order[: r - len(chosen)])
    if walk_info is not None:
        walk_info.update(steps=steps, fallback=fallback)
    return chosen


def election_target(participated: bool, correct: bool | None = None) -> float:
    if not participated:
        return 0.5
    return 1.0 if correct else 0.0


def link_factor(tt: int, correct: bool) -> float:
    if tt < 1:
        raise ValidationError("streak length must be at least 1")
    return (tt + 1) / (2 * tt) if correct else (2 * tt - 1) / (2 * tt)


def update_links(
    g: CollaborationGraph,
    answerer: int,
    reviewers: Sequence[int],
    correct: bool,
    streaks: StreakState,
) -> CollaborationGraph:
    """Re-weight the answerer's edges to its reviewers after one outcome.

    Advances `streaks` in place; returns a new graph.
    """
    if len(set(reviewers)) != len(reviewers) or answerer in reviewers:
        raise ValidationError("reviewers must be distinct and exclude the answerer")
    tt = streaks.advance(answerer, correct)
    factor = link_factor(tt, correct)
    out = g.copy()
    for j in reviewers:
        out.weights[answerer, j] *= factor
    return out


@dataclass
class ElectionVector:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or not np.all((p >= 0) & (p <= 1)):
            raise ValidationError("election probabilities must be a vector in [0, 1]")
        self.p = p

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @classmethod
    def uniform(cls, n: int, value: float = 0.5) -> "ElectionVector":
        return cls(np.full(n, value))


def elect(
    lst: ElectionVector,
    k: int,
    mode: Literal["topk", "bernoulli"] = "topk",
    rng_seed: int | np.random.Generator | None = None,
) -> list[int]:
    """Choose answer agents.

    ``topk`` returns the k most probable agents in descending order (lower
    index first on ties); its head is the designated fallback speaker.
    ``bernoulli`` includes each agent independently with its probability,
    falling back to the single most probable agent if nobody is drawn.
    """
    p = lst.p
    order = sorted(range(lst.n), key=lambda i: (-p[i], i))
    if mode == "topk":
        if not 1 <= k <= lst.n:
            raise ValidationError(f"cannot elect {k} of {lst.n} agents")
        return order[:k]
    if mode == "bernoulli":
        draws = as_rng(rng_seed).random(lst.n) < p
        picked = [i for i in order if draws[i]]
        return picked or order[:1]
    raise ValidationError(f"unknown election mode {mode!r}")
