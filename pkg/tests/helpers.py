"""Shared fixtures data and a scripted agent for deterministic protocol scenarios."""

from smilegeo.agents import AgentId, AgentUnavailable, LocationAnswer, ReviewComment
from smilegeo.geo import Gazetteer, GazetteerEntry, GeoBox

CITIES = {
    "Paris": (48.81, 2.22, 48.90, 2.47),
    "London": (51.28, -0.51, 51.69, 0.33),
    "Rome": (41.80, 12.37, 42.00, 12.62),
    "Madrid": (40.31, -3.83, 40.56, -3.52),
    "Berlin": (52.34, 13.09, 52.68, 13.76),
    "Vienna": (48.12, 16.18, 48.32, 16.58),
}


def city_gazetteer() -> Gazetteer:
    return Gazetteer(GazetteerEntry(name, (name.lower(),), GeoBox.from_bounds(*b)) for name, b in CITIES.items())


class Scripted:
    """Answers a fixed place and never changes its mind unless told to follow majorities."""

    def __init__(self, index, place, conf=70.0, follow=False, down=False):
        self.id = AgentId(index, f"s{index}")
        self.place, self.conf, self.follow, self.down = place, conf, follow, down

    def _check(self):
        if self.down:
            raise AgentUnavailable(self.id.name)

    def answer(self, image, retrieval_enabled=False, **kw):
        self._check()
        return LocationAnswer(self.place, self.conf, f"{self.id.name} thinks {self.place}")

    def review(self, image, subject, retrieval_enabled=False, **kw):
        self._check()
        return ReviewComment(self.id, "fine", self.conf, subject.location_text, True)

    def summarize(self, own, reviews, **kw):
        self._check()
        return own

    def discuss(self, snapshot, own, **kw):
        self._check()
        if self.follow and snapshot:
            latest = {u.speaker.index: u.answer for u in snapshot}
            texts = [a.location_text for a in latest.values()]
            top = max(set(texts), key=texts.count)
            if texts.count(top) > 1:
                return next(a for a in latest.values() if a.location_text == top)
        return own
