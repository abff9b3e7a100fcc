"""Agents: the answer / review / summarize / discuss behaviours.

Two backends share one duck-typed surface. `SimulatedAgent` is a seeded
stand-in for a vision-language model with regional expertise; `HttpAgent`
forwards each call to a remote model speaking the ``/v1/act`` protocol.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import requests

from ._rng import keyed_rng
from .errors import AgentUnavailable, NotGeocodable, ValidationError
from .geo import CITY_LEVEL_KM, Gazetteer, GeoBox, box_distance_km, cluster_by_proximity

CORRECT_CONFIDENCE = (70.0, 95.0)
INCORRECT_CONFIDENCE = (40.0, 80.0)
AGREE_CONFIDENCE_FLOOR = 70.0
# percentage points of confidence gained per unit of agreeing review mass
AGREEMENT_GAIN = 10.0
# an adopted dissenting view keeps this share of its proposer's confidence
ADOPTION_DISCOUNT = 0.9
DEFAULT_RETRIEVAL_BONUS = 0.15
DEFAULT_TIMEOUT_S = 30.0


@dataclass(frozen=True)
class AgentId:
    index: int
    name: str


@dataclass(frozen=True)
class ImageRef:
    """An opaque image handle.

    ``seed`` stands in for pixel content; ``truth_text`` and ``region_key``
    are only read by simulated agents. ``caption`` is what an agent would
    search the web with.
    """

    id: str
    seed: int | None = None
    region_key: str = ""
    truth_text: str = ""
    caption: str = ""


def _check_confidence(value: float) -> None:
    if not 0.0 <= value <= 100.0:
        raise ValidationError(f"confidence {value} outside [0, 100]")


@dataclass(frozen=True)
class LocationAnswer:
    location_text: str
    confidence_pct: float
    explanation: str

    def __post_init__(self):
        if not self.location_text.strip():
            raise ValidationError("an answer must name a location")
        _check_confidence(self.confidence_pct)

    def render(self) -> str:
        return f"location: {self.location_text}\nconfidence: {self.confidence_pct:g}%\nexplanation: {self.explanation}"

    def to_dict(self) -> dict:
        return {"location": self.location_text, "confidence": self.confidence_pct, "explanation": self.explanation}


@dataclass(frozen=True)
class ReviewComment:
    reviewer: AgentId
    text: str
    confidence_pct: float
    # the reviewer's own placement of the image, when it offers one
    location_text: str = ""
    agrees: bool | None = None

    def __post_init__(self):
        _check_confidence(self.confidence_pct)

    def render(self) -> str:
        return f"review: {self.text}\nconfidence: {self.confidence_pct:g}%"


@dataclass(frozen=True)
class Utterance:
    seq: int
    round: int
    speaker: AgentId
    answer: LocationAnswer


@dataclass(frozen=True)
class AgentProfile:
    home_regions: tuple[str, ...]
    home_accuracy: float
    away_accuracy: float
    seed: int
    persuadability: float

    def __post_init__(self):
        for name in ("home_accuracy", "away_accuracy", "persuadability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")
        if self.home_accuracy < self.away_accuracy:
            raise ValidationError("home_accuracy must be at least away_accuracy")
        object.__setattr__(self, "home_regions", tuple(self.home_regions))


@dataclass(frozen=True)
class RetrievalDoc:
    key: str
    text: str


def retrieve(query: str, corpus: Sequence[RetrievalDoc]) -> list[RetrievalDoc]:
    """Docs whose key occurs (case-folded) in the query, in corpus order."""
    q = query.casefold()
    return [d for d in corpus if d.key and d.key.casefold() in q]


def load_corpus(path: str | Path) -> list[RetrievalDoc]:
    docs, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            doc = RetrievalDoc(str(obj["key"]), str(obj["text"]))
            if doc.key in seen:
                raise ValidationError(f"line {lineno}: duplicate retrieval key {doc.key!r}")
            seen.add(doc.key)
            docs.append(doc)
    return docs


def corpus_from_gazetteer(gazetteer: Gazetteer) -> list[RetrievalDoc]:
    """A default offline corpus: one reference note per gazetteer place."""
    return [RetrievalDoc(e.canonical_name, f"Travel notes and photos of {e.canonical_name}.") for e in gazetteer]


def _try_geocode(text: str, gazetteer: Gazetteer) -> GeoBox | None:
    try:
        return gazetteer.geocode(text)
    except NotGeocodable:
        return None


def _latest_per_speaker(snapshot: Sequence[Utterance]) -> dict[int, Utterance]:
    latest: dict[int, Utterance] = {}
    for u in sorted(snapshot, key=lambda u: u.seq):
        latest[u.speaker.index] = u
    return latest


@dataclass
class SimWorld:
    """What every simulated agent shares: the map, the threshold and the search corpus."""

    gazetteer: Gazetteer
    th: float = CITY_LEVEL_KM
    corpus: Sequence[RetrievalDoc] = ()
    retrieval_bonus: float = DEFAULT_RETRIEVAL_BONUS


class SimulatedAgent:
    """A seeded regional expert.

    It places an image correctly with its home or away accuracy, otherwise it
    names a fixed per-image decoy place. Every random draw is keyed by
    (agent seed, image, stage, round, episode), so calls commute.
    """

    def __init__(self, agent_id: AgentId, profile: AgentProfile, world: SimWorld):
        self.id = agent_id
        self.profile = profile
        self.world = world

    def __repr__(self):
        return f"SimulatedAgent({self.id.index}, {self.id.name!r})"

    def success_probability(self, image: ImageRef, retrieval_enabled: bool) -> float:
        p = self.profile.home_accuracy if image.region_key in self.profile.home_regions else self.profile.away_accuracy
        if retrieval_enabled and retrieve(image.caption or image.id, self.world.corpus):
            p = min(1.0, p + self.world.retrieval_bonus)
        return p

    def decoy(self, image: ImageRef) -> str:
        truth = _try_geocode(image.truth_text, self.world.gazetteer) if image.truth_text else None
        candidates = [
            e for e in self.world.gazetteer
            if truth is None or box_distance_km(e.box, truth) > self.world.th
        ]
        if not candidates:
            return "Unknown location"
        rng = keyed_rng("decoy", self.profile.seed, image.id)
        return candidates[int(rng.integers(len(candidates)))].canonical_name

    def answer(self, image: ImageRef, retrieval_enabled: bool = False, *,
               stage: str = "answer", round: int = 0, episode: int = 0, context=None) -> LocationAnswer:
        p = self.success_probability(image, retrieval_enabled)
        rng = keyed_rng("answer", self.profile.seed, image.id, stage, round, episode)
        hit = rng.random() < p and bool(image.truth_text)
        if hit:
            text = image.truth_text
            conf = rng.uniform(*CORRECT_CONFIDENCE)
        else:
            text = self.decoy(image)
            conf = rng.uniform(*INCORRECT_CONFIDENCE)
        conf = round_pct(conf)
        why = f"Architecture, vegetation and signage are consistent with {text}."
        if retrieval_enabled:
            why += " Search results were consulted."
        return LocationAnswer(text, conf, why)

    def review(self, image: ImageRef, subject: LocationAnswer, retrieval_enabled: bool = False, *,
               round: int = 0, episode: int = 0, context=None) -> ReviewComment:
        own = self.answer(image, retrieval_enabled, stage="review", round=round, episode=episode)
        theirs = _try_geocode(subject.location_text, self.world.gazetteer)
        mine = _try_geocode(own.location_text, self.world.gazetteer)
        agrees = theirs is not None and mine is not None and box_distance_km(theirs, mine) <= self.world.th
        if agrees:
            conf = max(AGREE_CONFIDENCE_FLOOR, own.confidence_pct)
            text = f"I agree with {subject.location_text}; the explanation holds up."
        else:
            conf = own.confidence_pct
            text = f"I disagree with {subject.location_text}; this looks like {own.location_text} to me."
        return ReviewComment(self.id, text, conf, own.location_text, agrees)

    def _agrees(self, comment: ReviewComment, own: LocationAnswer) -> bool:
        if comment.agrees is not None:
            return comment.agrees
        a = _try_geocode(comment.location_text, self.world.gazetteer)
        b = _try_geocode(own.location_text, self.world.gazetteer)
        return a is not None and b is not None and box_distance_km(a, b) <= self.world.th

    def summarize(self, own: LocationAnswer, reviews: Sequence[ReviewComment], *,
                  image: ImageRef | None = None, episode: int = 0, context=None) -> LocationAnswer:
        """Fold reviewer feedback into a revised answer.

        Switches to the most confident dissenting place when
        ``persuadability * dissent mass`` outweighs own confidence plus the
        agreeing mass (masses are confidences / 100).
        """
        if not reviews:
            return own
        agreeing = [c for c in reviews if self._agrees(c, own)]
        dissent = [c for c in reviews if c not in agreeing and c.location_text.strip()]
        agree_mass = sum(c.confidence_pct for c in agreeing) / 100
        dissent_mass = sum(c.confidence_pct for c in dissent) / 100
        if dissent and self.profile.persuadability * dissent_mass > own.confidence_pct / 100 + agree_mass:
            best = max(dissent, key=lambda c: c.confidence_pct)
            return LocationAnswer(
                best.location_text,
                round_pct(best.confidence_pct * ADOPTION_DISCOUNT),
                f"Reviewers made a convincing case for {best.location_text}: {best.text}",
            )
        conf = round_pct(min(100.0, own.confidence_pct + AGREEMENT_GAIN * agree_mass))
        return LocationAnswer(own.location_text, conf, own.explanation)

    def discuss(self, dialog_snapshot: Sequence[Utterance], own_latest: LocationAnswer, *,
                image: ImageRef | None = None, round: int = 1, episode: int = 0, context=None) -> LocationAnswer:
        """Restate, or join a strictly larger cluster with probability `persuadability`."""
        others = [u for i, u in _latest_per_speaker(dialog_snapshot).items() if i != self.id.index]
        if not others:
            return own_latest
        answers = [own_latest] + [u.answer for u in others]
        clusters = cluster_by_proximity([a.location_text for a in answers], self.world.gazetteer, self.world.th)
        own_cluster = next(c for c in clusters if 0 in c)
        biggest = max(clusters, key=len)
        if len(biggest) <= len(own_cluster):
            return own_latest
        rng = keyed_rng("discuss", self.profile.seed, image.id if image else "", round, episode)
        if rng.random() >= self.profile.persuadability:
            return own_latest
        pick = max(biggest, key=lambda i: (answers[i].confidence_pct, -i))
        chosen = answers[pick]
        return LocationAnswer(chosen.location_text, chosen.confidence_pct,
                              f"Most of the discussion converges on {chosen.location_text}.")


def round_pct(x: float) -> float:
    return round(float(x), 2)


_LABEL = re.compile(r"^\s*(location|confidence|explanation)\s*[:：]\s*(.*)$", re.IGNORECASE)


def _parse_confidence(raw) -> float:
    if isinstance(raw, (int, float)):
        value = float(raw)
    else:
        m = re.search(r"-?\d+(?:\.\d+)?", str(raw))
        value = float(m.group()) if m else 50.0
    if value != value:
        value = 50.0
    return min(100.0, max(0.0, value))


def parse_reply(body: str) -> LocationAnswer:
    """Lenient reading of a model reply.

    Accepts the JSON object of the protocol, or text with ``location:``,
    ``confidence:`` and ``explanation:`` lines, or falls back to treating the
    whole text as the location at 50% confidence.
    """
    try:
        obj = json.loads(body)
    except (ValueError, TypeError):
        obj = None
    if isinstance(obj, dict) and str(obj.get("location", "")).strip():
        return LocationAnswer(
            str(obj["location"]).strip(),
            _parse_confidence(obj.get("confidence", 50.0)),
            str(obj.get("explanation", "")).strip() or "(no explanation given)",
        )
    fields: dict[str, str] = {}
    for line in str(body).splitlines():
        m = _LABEL.match(line)
        if m and m.group(1).lower() not in fields:
            fields[m.group(1).lower()] = m.group(2).strip()
    if fields.get("location"):
        return LocationAnswer(
            fields["location"],
            _parse_confidence(fields.get("confidence", 50.0)),
            fields.get("explanation") or "(no explanation given)",
        )
    text = " ".join(str(body).split()) or "(no answer)"
    return LocationAnswer(text, 50.0, "(unstructured reply)")


class HttpAgent:
    """A remote model reached over ``POST {endpoint}/v1/act``.

    Transport errors, timeouts and non-200 replies raise AgentUnavailable.
    """

    def __init__(self, agent_id: AgentId, endpoint: str, timeout: float = DEFAULT_TIMEOUT_S,
                 session: requests.Session | None = None):
        self.id = agent_id
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def __repr__(self):
        return f"HttpAgent({self.id.index}, {self.endpoint!r})"

    def _act(self, role: str, image: ImageRef | None, context: Iterable[str] | None) -> LocationAnswer:
        body = {
            "role": role,
            "image_ref": image.id if image is not None else "",
            "context": list(context or []),
            "format": "location/confidence/explanation",
        }
        try:
            resp = self.session.post(f"{self.endpoint}/v1/act", json=body, timeout=self.timeout)
        except requests.RequestException as exc:
            raise AgentUnavailable(f"{self.id.name}: {exc}") from exc
        if resp.status_code != 200:
            raise AgentUnavailable(f"{self.id.name}: HTTP {resp.status_code}")
        return parse_reply(resp.text)

    def answer(self, image, retrieval_enabled=False, *, stage="answer", round=0, episode=0, context=None):
        return self._act("answer", image, context)

    def review(self, image, subject, retrieval_enabled=False, *, round=0, episode=0, context=None):
        reply = self._act("review", image, context if context is not None else [subject.render()])
        return ReviewComment(self.id, reply.explanation, reply.confidence_pct, reply.location_text, None)

    def summarize(self, own, reviews, *, image=None, episode=0, context=None):
        if context is None:
            context = [own.render()] + [c.render() for c in reviews]
        return self._act("summarize", image, context)

    def discuss(self, dialog_snapshot, own_latest, *, image=None, round=1, episode=0, context=None):
        if context is None:
            context = [u.answer.render() for u in _latest_per_speaker(dialog_snapshot).values()] + [own_latest.render()]
        return self._act("discuss", image, context)
