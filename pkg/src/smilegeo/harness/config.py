"""Run configuration: a TOML file, overridable from the command line.

Schema (every key optional except ``roster`` and ``gazetteer``)::

    seed = 0
    roster = "roster.json"        # {"agents": [profile or {"endpoint": url}, ...]}
    gazetteer = "gazetteer.csv"
    dataset = "dataset.jsonl"     # used when no dataset is given explicitly
    corpus = "corpus.jsonl"       # retrieval docs; defaults to one doc per gazetteer place
    retrieval_bonus = 0.15
    train_fraction = 0.8
    timeout_s = 30.0              # HTTP agents only

    [discussion]                  # k, r, z, th, retrieval_enabled, image_token_constant, max_context, max_workers
    [train]                       # l_rounds, epochs, lr, report_window, d_k, d_h

Relative paths resolve against the directory holding the config file.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..agents import DEFAULT_RETRIEVAL_BONUS, DEFAULT_TIMEOUT_S, SimWorld, corpus_from_gazetteer, load_corpus
from ..discussion import DiscussionConfig
from ..errors import ValidationError
from ..geo import Gazetteer
from ..learn import TrainConfig
from .data import build_roster, load_roster_spec

_TOP_KEYS = {"seed", "roster", "gazetteer", "dataset", "corpus", "retrieval_bonus", "train_fraction",
             "timeout_s", "discussion", "train"}


@dataclass
class RunConfig:
    roster: Path
    gazetteer: Path
    discussion: DiscussionConfig = field(default_factory=DiscussionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: Path | None = None
    corpus: Path | None = None
    retrieval_bonus: float = DEFAULT_RETRIEVAL_BONUS
    train_fraction: float = 0.8
    timeout_s: float = DEFAULT_TIMEOUT_S
    seed: int = 0

    def __post_init__(self):
        for label in ("roster", "gazetteer", "dataset", "corpus"):
            path = getattr(self, label)
            if path is not None and not Path(path).is_file():
                raise ValidationError(f"{label} file {path} does not exist")
        if not 0.0 <= self.retrieval_bonus <= 1.0:
            raise ValidationError("retrieval_bonus must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("train_fraction must lie strictly between 0 and 1")

    def load_gazetteer(self) -> Gazetteer:
        return Gazetteer.from_csv(self.gazetteer)

    def build(self, gazetteer: Gazetteer | None = None) -> tuple[list, Gazetteer]:
        """Instantiate the roster against the configured map and corpus."""
        gaz = gazetteer or self.load_gazetteer()
        corpus = load_corpus(self.corpus) if self.corpus else corpus_from_gazetteer(gaz)
        world = SimWorld(gaz, self.discussion.th, corpus, self.retrieval_bonus)
        roster = build_roster(load_roster_spec(self.roster), world, self.timeout_s)
        if len(roster) < self.discussion.k:
            raise ValidationError(f"roster of {len(roster)} cannot fill k={self.discussion.k}")
        return roster, gaz

    def echo(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["discussion"] = asdict(self.discussion)
        d["train"] = asdict(self.train)
        return {k: (str(v) if isinstance(v, Path) else v) for k, v in d.items()}

    def with_overrides(self, **changes) -> "RunConfig":
        """Apply flat overrides; None values are ignored. Discussion keys are routed to the sub-config."""
        changes = {k: v for k, v in changes.items() if v is not None}
        seed = changes.pop("seed", None)
        disc = {k: v for k, v in changes.items() if k in DiscussionConfig.__dataclass_fields__}
        tr = {k: v for k, v in changes.items() if k in TrainConfig.__dataclass_fields__ and k not in disc}
        top = {k: v for k, v in changes.items() if k not in disc and k not in tr}
        if seed is not None:
            top["seed"] = tr["seed"] = seed
        return replace(self, discussion=replace(self.discussion, **disc), train=replace(self.train, **tr), **top)


def _section(raw: dict, name: str, cls):
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ValidationError(f"[{name}] must be a table")
    unknown = set(sec) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValidationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**sec)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    for key in ("roster", "gazetteer"):
        if key not in raw:
            raise ValidationError(f"config lacks required key {key!r}")
    base = path.parent

    def resolve(key):
        return base / raw[key] if raw.get(key) else None

    seed = int(raw.get("seed", 0))
    train = _section(raw, "train", TrainConfig)
    return RunConfig(
        roster=resolve("roster"), gazetteer=resolve("gazetteer"),
        discussion=_section(raw, "discussion", DiscussionConfig),
        train=replace(train, seed=seed) if "seed" not in raw.get("train", {}) else train,
        dataset=resolve("dataset"), corpus=resolve("corpus"),
        retrieval_bonus=float(raw.get("retrieval_bonus", DEFAULT_RETRIEVAL_BONUS)),
        train_fraction=float(raw.get("train_fraction", 0.8)),
        timeout_s=float(raw.get("timeout_s", DEFAULT_TIMEOUT_S)), seed=seed,
    )


def write_config(path: str | Path, cfg: RunConfig) -> None:
    """Serialise a config back to TOML (paths made relative to the file when possible)."""
    path = Path(path)

    def rel(p):
        try:
            return str(Path(p).resolve().relative_to(path.parent.resolve()))
        except ValueError:
            return str(Path(p).resolve())

    def value(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'

    lines = [f"seed = {cfg.seed}", f"roster = {value(rel(cfg.roster))}", f"gazetteer = {value(rel(cfg.gazetteer))}"]
    for key in ("dataset", "corpus"):
        if getattr(cfg, key) is not None:
            lines.append(f"{key} = {value(rel(getattr(cfg, key)))}")
    lines += [f"retrieval_bonus = {value(cfg.retrieval_bonus)}", f"train_fraction = {value(cfg.train_fraction)}",
              f"timeout_s = {value(cfg.timeout_s)}", "", "[discussion]"]
    lines += [f"{k} = {value(v)}" for k, v in asdict(cfg.discussion).items()]
    # a training seed equal to the run seed is implied
    lines += ["", "[train]"] + [f"{k} = {value(v)}" for k, v in asdict(cfg.train).items()
                                if not (k == "seed" and v == cfg.seed)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
