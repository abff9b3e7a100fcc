"""Datasets, rosters and seeded synthetic worlds."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .._rng import derive_seed, keyed_rng
from ..agents import AgentId, AgentProfile, HttpAgent, ImageRef, SimWorld, SimulatedAgent
from ..errors import IngestError, NotGeocodable, ValidationError
from ..geo import CITY_LEVEL_KM, Gazetteer, GazetteerEntry, GeoBox, box_distance_km, write_gazetteer

ROSTER_FILE = "roster.json"
DATASET_FILE = "dataset.jsonl"
GAZETTEER_FILE = "gazetteer.csv"

# grid cell and region box sizes, degrees
CELL_DEG = 6.0
REGION_DEG = 2.0
PLACE_DEG = 0.1
MAX_ABS_LAT = 60.0
CAPTION_TEMPLATE = "street scene near {place}"
_SYLLABLES = ("ka", "lo", "mir", "ven", "tal", "dor", "si", "bra", "nu", "qel", "zan", "fo",
              "ri", "mol", "the", "gar", "pe", "wyn", "cu", "ost")


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    image_seed: int
    truth_text: str
    truth_box: GeoBox
    region_key: str
    caption: str = ""

    def to_image(self) -> ImageRef:
        return ImageRef(self.id, self.image_seed, self.region_key, self.truth_text, self.caption)

    def to_dict(self) -> dict:
        d = {"id": self.id, "image_seed": self.image_seed, "truth_text": self.truth_text,
             "truth_box": list(self.truth_box.bounds), "region_key": self.region_key}
        if self.caption:
            d["caption"] = self.caption
        return d


def _record(obj) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    missing = {"id", "image_seed", "truth_text", "truth_box", "region_key"} - obj.keys()
    if missing:
        raise ValueError(f"missing fields {sorted(missing)}")
    box = obj["truth_box"]
    if not isinstance(box, list) or len(box) != 4:
        raise ValueError("truth_box must be [south, west, north, east]")
    seed = obj["image_seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ValueError("image_seed must be a 64-bit unsigned integer")
    return DatasetRecord(str(obj["id"]), seed, str(obj["truth_text"]),
                         GeoBox.from_bounds(*(float(v) for v in box)), str(obj["region_key"]),
                         str(obj.get("caption", "")))


def ingest(path: str | Path, gazetteer: Gazetteer | None = None) -> list[DatasetRecord]:
    """Read a dataset JSONL file, one record per line, keeping file order.

    Blank lines are skipped. With a gazetteer, every truth text must geocode.
    """
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = _record(json.loads(line))
            except (ValueError, TypeError) as exc:
                raise IngestError(str(exc), lineno) from exc
            if rec.id in seen:
                raise IngestError(f"duplicate id {rec.id!r}", lineno)
            if gazetteer is not None:
                try:
                    gazetteer.geocode(rec.truth_text)
                except NotGeocodable:
                    raise IngestError(f"truth {rec.truth_text!r} of {rec.id!r} is not geocodable", lineno) from None
            seen.add(rec.id)
            records.append(rec)
    return records


def write_dataset(path: str | Path, records: Sequence[DatasetRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def split(records: Sequence[DatasetRecord], train_fraction: float = 0.8, seed: int = 0):
    """Seeded shuffle, then cut into (train, test)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(derive_seed("split", seed)).permutation(len(records))
    cut = int(round(train_fraction * len(records)))
    return [records[i] for i in order[:cut]], [records[i] for i in order[cut:]]


# rosters

def profile_to_dict(name: str, p: AgentProfile) -> dict:
    return {"name": name, "home_regions": list(p.home_regions), "home_accuracy": p.home_accuracy,
            "away_accuracy": p.away_accuracy, "seed": p.seed, "persuadability": p.persuadability}


def load_roster_spec(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        spec = json.load(fh)
    agents = spec.get("agents") if isinstance(spec, dict) else None
    if not isinstance(agents, list) or not agents:
        raise ValidationError(f"{path}: roster needs a non-empty 'agents' list")
    return agents


def build_roster(spec: Sequence[dict], world: SimWorld, timeout: float | None = None) -> list:
    """Agents from roster entries: an ``endpoint`` makes an HTTP agent, profile fields a simulated one."""
    roster = []
    for i, entry in enumerate(spec):
        name = str(entry.get("name", f"agent-{i}"))
        if "endpoint" in entry:
            kwargs = {} if timeout is None else {"timeout": timeout}
            roster.append(HttpAgent(AgentId(i, name), entry["endpoint"], **kwargs))
            continue
        try:
            profile = AgentProfile(tuple(entry["home_regions"]), float(entry["home_accuracy"]),
                                   float(entry["away_accuracy"]), int(entry["seed"]),
                                   float(entry.get("persuadability", 0.5)))
        except KeyError as exc:
            raise ValidationError(f"roster entry {i} lacks {exc.args[0]!r}") from None
        roster.append(SimulatedAgent(AgentId(i, name), profile, world))
    return roster


# synthetic worlds

@dataclass
class SynthWorld:
    regions: list[tuple[str, GeoBox]]
    names: list[str]
    profiles: list[AgentProfile]
    dataset: list[DatasetRecord]
    gazetteer: Gazetteer
    th: float

    def roster_spec(self) -> list[dict]:
        return [profile_to_dict(n, p) for n, p in zip(self.names, self.profiles)]

    def save(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / ROSTER_FILE, out / DATASET_FILE, out / GAZETTEER_FILE]
        with open(paths[0], "w", encoding="utf-8") as fh:
            json.dump({"agents": self.roster_spec()}, fh, indent=2)
            fh.write("\n")
        write_dataset(paths[1], self.dataset)
        write_gazetteer(paths[2], self.gazetteer)
        return paths


def _place_names(count: int, rng: np.random.Generator) -> list[str]:
    names: list[str] = []
    template = CAPTION_TEMPLATE.format(place="").casefold()
    while len(names) < count:
        name = "".join(rng.choice(_SYLLABLES, size=3)).capitalize()
        key = name.casefold()
        # no alias may sit inside another or inside caption boilerplate
        if key in template or any(key in n.casefold() or n.casefold() in key for n in names):
            continue
        names.append(name)
    return names


def _region_boxes(n_regions: int, th: float, rng: np.random.Generator) -> list[GeoBox]:
    cells = [(float(lat), float(lon)) for lat in np.arange(-MAX_ABS_LAT, MAX_ABS_LAT, CELL_DEG)
             for lon in np.arange(-180.0, 180.0, CELL_DEG)]
    pad = (CELL_DEG - REGION_DEG) / 2
    picked: list[GeoBox] = []
    for idx in rng.permutation(len(cells)):
        lat, lon = cells[idx]
        box = GeoBox.from_bounds(lat + pad, lon + pad, lat + pad + REGION_DEG, lon + pad + REGION_DEG)
        if all(box_distance_km(box, other) > 5 * th for other in picked):
            picked.append(box)
            if len(picked) == n_regions:
                return picked
    raise ValidationError(f"cannot place {n_regions} regions more than {5 * th:g} km apart")


def _places(region: GeoBox) -> list[GeoBox]:
    s, w, n, e = region.bounds
    mid = (w + e) / 2
    corners = [(s, w), (s, e - PLACE_DEG), (n - PLACE_DEG, mid - PLACE_DEG / 2)]
    return [GeoBox.from_bounds(a, b, a + PLACE_DEG, b + PLACE_DEG) for a, b in corners]


def synth_world(n_agents: int, n_regions: int, n_samples: int, seed: int, *, th: float = CITY_LEVEL_KM,
                home_accuracy: float = 0.9, away_accuracy: float = 0.2, persuadability: float = 0.6,
                k: int = 1) -> SynthWorld:
    """A seeded world of separated regions, three named places each, and regional experts.

    Agent ``i`` is at home in region ``i mod n_regions``. Every image of a
    region shares that region's scene code in the high 32 bits of its seed.
    """
    if n_regions < 2:
        raise ValidationError("a world needs at least two regions")
    if n_agents < max(k, 1):
        raise ValidationError(f"{n_agents} agents cannot fill {k} answer slots")
    if n_samples < 0:
        raise ValidationError("n_samples must be non-negative")
    rng = keyed_rng("synth", seed)
    boxes = _region_boxes(n_regions, th, rng)
    keys = [f"region-{i}" for i in range(n_regions)]
    names = _place_names(3 * n_regions, rng)
    entries, by_region = [], []
    for r, box in enumerate(boxes):
        mine = []
        for j, place in enumerate(_places(box)):
            entry = GazetteerEntry(names[3 * r + j], (names[3 * r + j],), place)
            entries.append(entry)
            mine.append(entry)
        by_region.append(mine)
    scenes = rng.choice(2**31, size=n_regions, replace=False)
    profiles = [AgentProfile((keys[i % n_regions],), home_accuracy, away_accuracy,
                             int(rng.integers(2**31)), persuadability) for i in range(n_agents)]
    agent_names = [f"agent-{i}" for i in range(n_agents)]
    records = []
    for s in range(n_samples):
        r = int(rng.integers(n_regions))
        entry = by_region[r][int(rng.integers(3))]
        image_seed = (int(scenes[r]) << 32) | int(rng.integers(2**32))
        records.append(DatasetRecord(f"s{s:05d}", image_seed, entry.canonical_name, entry.box, keys[r],
                                     CAPTION_TEMPLATE.format(place=entry.canonical_name)))
    return SynthWorld(list(zip(keys, boxes)), agent_names, profiles, records, Gazetteer(entries), th)
