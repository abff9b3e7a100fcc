"""Geodesic distances, offline geocoding and evaluation metrics.

Coordinates are WGS84 degrees; distances are great-circle kilometres on a
sphere of mean Earth radius. Regions are lat/lon boxes that may not cross the
antimeridian.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .errors import NotGeocodable, ValidationError

EARTH_RADIUS_KM = 6371.0088
# Distance assigned to an answer that cannot be placed on the map.
UNPLACEABLE_KM = math.pi * EARTH_RADIUS_KM
CITY_LEVEL_KM = 50.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValidationError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValidationError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValidationError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class GeoBox:
    south_west: GeoPoint
    north_east: GeoPoint

    def __post_init__(self):
        if self.south_west.lat > self.north_east.lat:
            raise ValidationError("box south edge lies north of its north edge")
        if self.south_west.lon > self.north_east.lon:
            raise ValidationError("antimeridian-wrapping boxes are not supported")

    @classmethod
    def from_bounds(cls, south: float, west: float, north: float, east: float) -> "GeoBox":
        return cls(GeoPoint(south, west), GeoPoint(north, east))

    @classmethod
    def point(cls, lat: float, lon: float) -> "GeoBox":
        p = GeoPoint(lat, lon)
        return cls(p, p)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(south, west, north, east)"""
        return (self.south_west.lat, self.south_west.lon, self.north_east.lat, self.north_east.lon)

    def intersects(self, other: "GeoBox") -> bool:
        s1, w1, n1, e1 = self.bounds
        s2, w2, n2, e2 = other.bounds
        return s1 <= n2 and s2 <= n1 and w1 <= e2 and w2 <= e1


@dataclass(frozen=True)
class GazetteerEntry:
    canonical_name: str
    aliases: tuple[str, ...]
    box: GeoBox

    def __post_init__(self):
        if not self.canonical_name.strip():
            raise ValidationError("gazetteer entry needs a canonical name")
        keys = tuple(a.casefold().strip() for a in self.aliases)
        if any(not k for k in keys):
            raise ValidationError(f"empty alias in entry {self.canonical_name!r}")
        if len(set(keys)) != len(keys):
            raise ValidationError(f"duplicate alias in entry {self.canonical_name!r}")
        object.__setattr__(self, "aliases", keys)


@dataclass(frozen=True)
class EvalOutcome:
    sample_id: str
    distance_km: float
    correct: bool


def _validate_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValidationError(f"non-finite value {v}")


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    _validate_finite(a.lat, a.lon, b.lat, b.lon)
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def _closest_coords(lo1: float, hi1: float, lo2: float, hi2: float, prefer: float) -> tuple[float, float]:
    # overlapping ranges share a coordinate: the one nearest `prefer`
    if lo1 <= hi2 and lo2 <= hi1:
        lo, hi = max(lo1, lo2), min(hi1, hi2)
        c = min(max(prefer, lo), hi)
        return c, c
    if hi1 < lo2:
        return hi1, lo2
    return lo1, hi2


def box_distance_km(a: GeoBox, b: GeoBox) -> float:
    """Shortest great-circle distance between two boxes; 0 when they overlap."""
    if a.intersects(b):
        return 0.0
    s1, w1, n1, e1 = a.bounds
    s2, w2, n2, e2 = b.bounds
    lat_a, lat_b = _closest_coords(s1, n1, s2, n2, prefer=0.0)
    lon_a, lon_b = _closest_coords(w1, e1, w2, e2, prefer=w1)
    return haversine_km(GeoPoint(lat_a, lon_a), GeoPoint(lat_b, lon_b))


class Gazetteer:
    """An in-memory alias index over gazetteer entries.

    Matching is case-folded substring containment; the longest matching alias
    wins and ties go to the entry listed first.
    """

    def __init__(self, entries: Iterable[GazetteerEntry]):
        self.entries: list[GazetteerEntry] = list(entries)
        index = [(alias, pos, entry) for pos, entry in enumerate(self.entries) for alias in entry.aliases]
        # longest first, then file order
        index.sort(key=lambda t: (-len(t[0]), t[1]))
        self._index = [(alias, entry) for alias, _, entry in index]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def lookup(self, text: str) -> GazetteerEntry:
        key = text.casefold()
        if key.strip():
            for alias, entry in self._index:
                if alias in key:
                    return entry
        raise NotGeocodable(text)

    def geocode(self, text: str) -> GeoBox:
        return self.lookup(text).box

    def by_name(self, name: str) -> GazetteerEntry:
        for e in self.entries:
            if e.canonical_name == name:
                return e
        raise KeyError(name)

    @classmethod
    def from_csv(cls, path: str | Path) -> "Gazetteer":
        return cls(load_gazetteer(path))


def load_gazetteer(path: str | Path) -> list[GazetteerEntry]:
    """Read the `canonical_name,aliases,south,west,north,east` CSV format."""
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["canonical_name", "aliases", "south", "west", "north", "east"]
        if reader.fieldnames != expected:
            raise ValidationError(f"gazetteer header must be {','.join(expected)}")
        for row in reader:
            aliases = tuple(a for a in row["aliases"].split("|") if a.strip())
            box = GeoBox.from_bounds(float(row["south"]), float(row["west"]), float(row["north"]), float(row["east"]))
            entries.append(GazetteerEntry(row["canonical_name"], aliases, box))
    return entries


def write_gazetteer(path: str | Path, entries: Iterable[GazetteerEntry]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["canonical_name", "aliases", "south", "west", "north", "east"])
        for e in entries:
            writer.writerow([e.canonical_name, "|".join(e.aliases), *(repr(v) for v in e.box.bounds)])


def geocode(text: str, gazetteer: Gazetteer | Sequence[GazetteerEntry]) -> GeoBox:
    if not isinstance(gazetteer, Gazetteer):
        gazetteer = Gazetteer(gazetteer)
    return gazetteer.geocode(text)


def is_correct(pred: GeoBox, truth: GeoBox, th: float = CITY_LEVEL_KM) -> bool:
    if not th > 0:
        raise ValidationError("threshold must be positive")
    return box_distance_km(pred, truth) <= th


def text_distance_km(text: str, truth: GeoBox, gazetteer: Gazetteer) -> float:
    """Distance from a free-text answer to the truth; unplaceable text is maximally far."""
    try:
        return box_distance_km(gazetteer.geocode(text), truth)
    except NotGeocodable:
        return UNPLACEABLE_KM


def score(sample_id: str, text: str, truth: GeoBox, gazetteer: Gazetteer, th: float = CITY_LEVEL_KM) -> EvalOutcome:
    try:
        d = box_distance_km(gazetteer.geocode(text), truth)
    except NotGeocodable:
        return EvalOutcome(sample_id, UNPLACEABLE_KM, False)
    return EvalOutcome(sample_id, d, d <= th)


def accuracy(outcomes: Sequence[EvalOutcome]) -> float:
    if not outcomes:
        raise ValidationError("accuracy of an empty outcome list is undefined")
    return sum(1 for o in outcomes if o.correct) / len(outcomes)


def coverage_consistency(train_locs: Iterable[str], test_locs: Iterable[str], exact: bool = False):
    """Location overlap between splits, as (coverage %, consistency %).

    With ``exact=True`` the percentages come back as Fractions.
    """
    train, test = set(train_locs), set(test_locs)
    if not train or not test:
        raise ValidationError("coverage/consistency need non-empty train and test sets")
    shared = len(train & test)
    coverage = Fraction(100 * shared, len(train))
    consistency = Fraction(100 * shared, len(test))
    if exact:
        return coverage, consistency
    return float(coverage), float(consistency)


def cluster_by_proximity(texts: Sequence[str], gazetteer: Gazetteer, th: float = CITY_LEVEL_KM) -> list[list[int]]:
    """Group answers whose geocoded boxes lie within `th` of each other.

    Agreement is closed transitively (connected components). Text that cannot
    be geocoded forms its own singleton. Clusters are ordered by their first
    member; members keep input order.
    """
    boxes: list[GeoBox | None] = []
    for t in texts:
        try:
            boxes.append(gazetteer.geocode(t))
        except NotGeocodable:
            boxes.append(None)
    parent = list(range(len(texts)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(texts)):
        if boxes[i] is None:
            continue
        for j in range(i + 1, len(texts)):
            if boxes[j] is not None and box_distance_km(boxes[i], boxes[j]) <= th:
                parent[find(j)] = find(i)
    groups: dict[int, list[int]] = {}
    for i in range(len(texts)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])
