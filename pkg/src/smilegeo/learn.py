"""Learning which agents to elect and how to wire them, per image.

The selection model maps image features and agent embeddings to an
agent-to-agent attention matrix (the predicted collaboration graph) and a
per-agent election probability. Targets come from replaying the protocol
several times against the ground truth; gradients are written out by hand and
verified against central differences.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from ._rng import derive_seed, keyed_rng
from .agents import ImageRef
from .discussion import DiscussionConfig, run_pipeline
from .errors import MissingImage, NumericalFault, PipelineFailed, ValidationError
from .geo import UNPLACEABLE_KM, Gazetteer, GeoBox, NotGeocodable, box_distance_km
from .graph import CollaborationGraph, ElectionVector, StreakState, elect, update_links

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
CHECKPOINT_MAGIC = b"SWGEO1"
PARAM_NAMES = ("emb", "fea_w", "fea_b", "w", "out_w", "out_b")


class FeatureExtractor(Protocol):
    d_k: int

    def __call__(self, image: ImageRef) -> np.ndarray: ...


class SeedFeatureExtractor:
    """Stand-in for an image encoder, driven by the image's 64-bit content seed.

    The high 32 bits of the seed name the scene and the low 32 bits the shot:
    each half selects a pseudo-random unit direction, and the feature is the
    normalised sum ``scene + detail_weight * shot``. Images sharing a scene
    therefore sit close together (cosine ~ 1 / (1 + detail_weight**2)) while
    unrelated seeds are nearly orthogonal.
    """

    def __init__(self, d_k: int = 64, salt: int = 0, detail_weight: float = 1.0):
        self.d_k = d_k
        self.salt = salt
        self.detail_weight = detail_weight

    def _direction(self, kind: str, key: int) -> np.ndarray:
        v = keyed_rng("feature", self.salt, self.d_k, kind, key).standard_normal(self.d_k)
        return v / np.linalg.norm(v)

    def __call__(self, image: ImageRef) -> np.ndarray:
        if image.seed is None:
            raise MissingImage(f"image {image.id!r} has no content seed")
        seed = int(image.seed) & 0xFFFF_FFFF_FFFF_FFFF
        v = self._direction("scene", seed >> 32) + self.detail_weight * self._direction("shot", seed & 0xFFFF_FFFF)
        return v / np.linalg.norm(v)


def extract_features(image: ImageRef, extractor: FeatureExtractor | None = None, d_k: int = 64) -> np.ndarray:
    return (extractor or SeedFeatureExtractor(d_k))(image)


@dataclass
class SelectionModel:
    emb: np.ndarray     # (n, d_k) agent embeddings
    fea_w: np.ndarray   # (d_k, d_k)
    fea_b: np.ndarray   # (d_k,)
    w: np.ndarray       # (d_k, d_h)
    out_w: np.ndarray   # (n * d_h, n)
    out_b: np.ndarray   # (n,)

    def __post_init__(self):
        n, d_k = self.emb.shape
        d_h = self.w.shape[1]
        shapes = {"emb": (n, d_k), "fea_w": (d_k, d_k), "fea_b": (d_k,), "w": (d_k, d_h),
                  "out_w": (n * d_h, n), "out_b": (n,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @property
    def n(self) -> int:
        return self.emb.shape[0]

    @property
    def d_k(self) -> int:
        return self.emb.shape[1]

    @property
    def d_h(self) -> int:
        return self.w.shape[1]

    @classmethod
    def init(cls, n: int, d_k: int = 64, d_h: int = 64, seed: int = 0) -> "SelectionModel":
        rng = np.random.default_rng(seed)
        return cls(
            emb=rng.standard_normal((n, d_k)) / math.sqrt(d_k),
            fea_w=rng.standard_normal((d_k, d_k)) / math.sqrt(d_k),
            fea_b=np.zeros(d_k),
            w=rng.standard_normal((d_k, d_h)) / math.sqrt(d_k),
            out_w=rng.standard_normal((n * d_h, n)) / math.sqrt(n * d_h),
            out_b=np.zeros(n),
        )

    @classmethod
    def zeros(cls, n: int, d_k: int, d_h: int) -> "SelectionModel":
        return cls(np.zeros((n, d_k)), np.zeros((d_k, d_k)), np.zeros(d_k), np.zeros((d_k, d_h)),
                   np.zeros((n * d_h, n)), np.zeros(n))

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "SelectionModel":
        return SelectionModel(**{k: v.copy() for k, v in self.params().items()})


@dataclass
class _Cache:
    x: np.ndarray
    h0: np.ndarray
    fea: np.ndarray
    a: np.ndarray
    af: np.ndarray
    m: np.ndarray
    flat: np.ndarray
    lst: np.ndarray


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(model: SelectionModel, x: np.ndarray) -> _Cache:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.d_k,):
        raise ValidationError(f"feature vector has shape {x.shape}, model expects ({model.d_k},)")
    n = model.n
    h0 = model.emb + x
    fea = h0 @ model.fea_w + model.fea_b
    if n > 1:
        s = fea @ fea.T / math.sqrt(model.d_k)
        np.fill_diagonal(s, -np.inf)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
    else:
        a = np.zeros((1, 1))
    af = a @ fea
    m = af @ model.w
    flat = np.where(m > 0, m, LEAKY_SLOPE * m).reshape(-1)
    lst = _sigmoid(flat @ model.out_w + model.out_b)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(lst))):
        raise NumericalFault("non-finite activation in selection model")
    return _Cache(x, h0, fea, a, af, m, flat, lst)


def forward(model: SelectionModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted collaboration matrix (zero diagonal, rows summing to 1) and election probabilities."""
    c = _forward(model, x)
    return c.a, c.lst


def _backward(model: SelectionModel, c: _Cache, d_lst: np.ndarray, d_a: np.ndarray) -> dict[str, np.ndarray]:
    n, d_h = model.n, model.d_h
    dz = d_lst * c.lst * (1.0 - c.lst)
    g_out_w = np.outer(c.flat, dz)
    d_m = (model.out_w @ dz).reshape(n, d_h) * np.where(c.m > 0, 1.0, LEAKY_SLOPE)
    g_w = c.af.T @ d_m
    d_af = d_m @ model.w.T
    d_a = d_af @ c.fea.T + d_a
    d_fea = c.a.T @ d_af
    d_s = c.a * (d_a - (d_a * c.a).sum(axis=1, keepdims=True))
    d_fea = d_fea + (d_s + d_s.T) @ c.fea / math.sqrt(model.d_k)
    return {
        "emb": d_fea @ model.fea_w.T,
        "fea_w": c.h0.T @ d_fea,
        "fea_b": d_fea.sum(axis=0),
        "w": g_w,
        "out_w": g_out_w,
        "out_b": dz,
    }


@dataclass
class TrainTargets:
    lst_hat: np.ndarray
    a_hat: np.ndarray
    # final-round distance (km) of each answering agent; NaN for non-answerers
    distances: np.ndarray = None
    # (round, answerer, reviewers, correct, streak length) per link update
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.lst_hat = np.asarray(self.lst_hat, dtype=np.float64)
        self.a_hat = np.asarray(self.a_hat, dtype=np.float64)
        n = self.lst_hat.shape[0]
        if self.a_hat.shape != (n, n):
            raise ValidationError("a_hat must be n x n")
        if self.distances is None:
            self.distances = np.full(n, np.nan)

    @property
    def answered(self) -> np.ndarray:
        return ~np.isnan(self.distances)


def _offdiag(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)


def mse_terms(pred_lst: np.ndarray, pred_a: np.ndarray, targets: TrainTargets) -> tuple[float, float]:
    n = pred_lst.shape[0]
    loss_lst = float(np.mean((pred_lst - targets.lst_hat) ** 2))
    mask = _offdiag(n)
    loss_a = float(np.mean((pred_a[mask] - targets.a_hat[mask]) ** 2)) if n > 1 else 0.0
    return loss_lst, loss_a


@dataclass(frozen=True)
class LossParts:
    total: float
    d: float
    lst: float
    a: float


def loss(pred_lst, pred_a, targets: TrainTargets, distances=None, answered=None, th: float = 50.0) -> LossParts:
    """Distance term (km / th, answering agents only) plus the two MSE terms."""
    if distances is None:
        distances = targets.distances
    distances = np.asarray(distances, dtype=np.float64)
    if answered is None:
        answered = ~np.isnan(distances)
    answered = np.asarray(answered, dtype=bool)
    d_term = float(np.sum(np.where(answered, np.nan_to_num(distances), 0.0)) / th)
    l_lst, l_a = mse_terms(np.asarray(pred_lst, dtype=np.float64), np.asarray(pred_a, dtype=np.float64), targets)
    return LossParts(d_term + l_lst + l_a, d_term, l_lst, l_a)


def loss_and_grads(model: SelectionModel, x: np.ndarray, targets: TrainTargets):
    """MSE part of the objective and its gradient w.r.t. every parameter."""
    c = _forward(model, x)
    n = model.n
    l_lst, l_a = mse_terms(c.lst, c.a, targets)
    d_lst = 2.0 * (c.lst - targets.lst_hat) / n
    d_a = np.zeros((n, n))
    if n > 1:
        mask = _offdiag(n)
        d_a[mask] = 2.0 * (c.a[mask] - targets.a_hat[mask]) / (n * (n - 1))
    return l_lst + l_a, _backward(model, c, d_lst, d_a), c


def reference_objective(params: dict[str, np.ndarray], x: np.ndarray, targets: TrainTargets,
                        dtype=np.longdouble) -> float:
    """The MSE objective, transcribed directly and evaluated in extended precision.

    Independent of `_forward`; used as the finite-difference oracle.
    """
    emb, fea_w, fea_b, w, out_w, out_b = (np.asarray(params[k], dtype=dtype) for k in PARAM_NAMES)
    n, d_k = emb.shape
    fea = (emb + np.asarray(x, dtype=dtype)) @ fea_w + fea_b
    a = np.zeros((n, n), dtype=dtype)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        if not others:
            continue
        logits = np.array([fea[i] @ fea[j] for j in others], dtype=dtype) / np.sqrt(dtype(d_k))
        e = np.exp(logits - logits.max())
        a[i, others] = e / e.sum()
    m = a @ fea @ w
    h = np.where(m > 0, m, dtype(LEAKY_SLOPE) * m).reshape(-1)
    lst = 1 / (1 + np.exp(-(h @ out_w + out_b)))
    l_lst = np.mean((lst - np.asarray(targets.lst_hat, dtype=dtype)) ** 2)
    if n > 1:
        mask = _offdiag(n)
        l_a = np.mean((a[mask] - np.asarray(targets.a_hat, dtype=dtype)[mask]) ** 2)
    else:
        l_a = dtype(0)
    return l_lst + l_a


def grad_check(
    model: SelectionModel,
    x: np.ndarray,
    targets: TrainTargets,
    h: float = 1e-5,
    floor: float = 1e-8,
    perturb: Callable[[dict[str, np.ndarray]], None] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is ``|a - f| / max(|a|, |f|, floor)``. Differences are taken
    on `reference_objective` in extended precision so that round-off does not
    swamp small gradient entries. `perturb` may edit the analytic gradients in
    place before comparison (for detector tests).
    """
    _, grads, _ = loss_and_grads(model, x, targets)
    if perturb is not None:
        perturb(grads)
    params = {k: np.asarray(v, dtype=np.longdouble) for k, v in model.params().items()}
    worst = 0.0
    for name in PARAM_NAMES:
        flat = params[name].reshape(-1)
        g = grads[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = reference_objective(params, x, targets)
            flat[idx] = orig - h
            down = reference_objective(params, x, targets)
            flat[idx] = orig
            fd = float((up - down) / (2 * np.longdouble(h)))
            err = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), floor)
            worst = max(worst, err)
    return worst


class Adam:
    def __init__(self, model: SelectionModel, lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params().items()}

    def step(self, model: SelectionModel, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in model.params().items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


@dataclass
class TrainConfig:
    l_rounds: int = 20
    epochs: int = 100
    lr: float = 1e-5
    report_window: int = 100
    d_k: int = 64
    d_h: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.l_rounds, self.epochs, self.report_window, self.d_k, self.d_h) < 1 or self.lr < 0:
            raise ValidationError("training configuration values must be positive")


def _distance(text: str, truth: GeoBox, gazetteer: Gazetteer) -> float:
    try:
        return box_distance_km(gazetteer.geocode(text), truth)
    except NotGeocodable:
        return UNPLACEABLE_KM


def estimate_targets(
    image: ImageRef,
    truth: GeoBox,
    roster: Sequence,
    cfg: TrainConfig,
    discussion_cfg: DiscussionConfig,
    rng_seed: int = 0,
    *,
    gazetteer: Gazetteer,
) -> TrainTargets:
    """Replay the protocol ``l_rounds`` times against the truth.

    Each round elects by independent draws from the previous round's targets,
    marks every answerer right (1) or wrong (0) by its summarized answer and
    everyone else 0.5, and re-weights each answerer's reviewer links with
    streaks carried across rounds. Round-L values are returned.
    """
    n = len(roster)
    lst = np.full(n, 0.5)
    g = CollaborationGraph.fully_connected(n)
    streaks = StreakState.fresh(n)
    distances = np.full(n, np.nan)
    trace = []
    for rnd in range(1, cfg.l_rounds + 1):
        distances = np.full(n, np.nan)
        try:
            verdict = run_pipeline(image, roster, ElectionVector(lst), g, discussion_cfg, "bernoulli",
                                   derive_seed("estimate", rng_seed, rnd), gazetteer=gazetteer)
        except PipelineFailed as exc:
            log.warning("round %d of %s failed (%s); nobody participates", rnd, image.id, exc)
            lst = np.full(n, 0.5)
            continue
        new = np.full(n, 0.5)
        for i in verdict.participants:
            dist = _distance(verdict.summaries[i].location_text, truth, gazetteer)
            correct = dist <= discussion_cfg.th
            distances[i] = dist
            new[i] = 1.0 if correct else 0.0
            revs = verdict.reviewers[i]
            g = update_links(g, i, revs, correct, streaks)
            tt = int(streaks.correct_run[i] if correct else streaks.incorrect_run[i])
            trace.append((rnd, i, list(revs), bool(correct), tt))
        lst = new
    return TrainTargets(lst, g.weights.copy(), distances, trace)


@dataclass
class TrainingSample:
    id: str
    x: np.ndarray
    targets: TrainTargets


def election_hit(lst: np.ndarray, targets: TrainTargets, k: int) -> bool:
    """Whether the top-k election includes an agent whose target marks it correct."""
    top = elect(ElectionVector(lst), min(k, lst.shape[0]))
    return bool(np.any(targets.lst_hat[top] == 1.0))


@dataclass
class TrainResult:
    model: SelectionModel
    history: list[dict]
    report: dict


def train(
    model: SelectionModel,
    samples: Sequence[TrainingSample],
    cfg: TrainConfig,
    *,
    k: int = 2,
    th: float = 50.0,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Per-sample Adam on the two MSE terms; the distance term is logged only.

    Returns the trained model (updated in place), one report row per epoch and
    a summary averaged over the last ``report_window`` epochs.
    """
    if not samples:
        raise ValidationError("training needs at least one sample")
    opt = Adam(model, lr=cfg.lr)
    rng = np.random.default_rng(derive_seed("train-order", cfg.seed))
    history: list[dict] = []
    hits: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(4)
        hit = 0
        for idx in rng.permutation(len(samples)):
            s = samples[idx]
            try:
                mse, grads, cache = loss_and_grads(model, s.x, s.targets)
            except NumericalFault as exc:
                raise NumericalFault(f"sample {s.id}: {exc}") from exc
            parts = loss(cache.lst, cache.a, s.targets, th=th)
            sums += (parts.total, parts.d, parts.lst, parts.a)
            hit += election_hit(cache.lst, s.targets, k)
            opt.step(model, grads)
            if not all(np.all(np.isfinite(p)) for p in model.params().values()):
                raise NumericalFault(f"sample {s.id}: parameters became non-finite")
        hits.append(hit / len(samples))
        mean = sums / len(samples)
        row = {"epoch": epoch, "loss_total": float(mean[0]), "loss_d": float(mean[1]),
               "loss_lst": float(mean[2]), "loss_a": float(mean[3]),
               "acc_window": float(np.mean(hits[-cfg.report_window:]))}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    window = history[-cfg.report_window:]
    report = {key: float(np.mean([r[key] for r in window])) for key in ("loss_total", "loss_d", "loss_lst", "loss_a")}
    report.update(epoch=cfg.epochs, acc_window=history[-1]["acc_window"])
    return TrainResult(model, history, report)


def save_checkpoint(model: SelectionModel, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<6sIII", CHECKPOINT_MAGIC, model.n, model.d_k, model.d_h))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> SelectionModel:
    data = Path(path).read_bytes()
    head = struct.calcsize("<6sIII")
    if len(data) < head:
        raise ValidationError("checkpoint is truncated")
    magic, n, d_k, d_h = struct.unpack_from("<6sIII", data)
    if magic != CHECKPOINT_MAGIC:
        raise ValidationError("not a selection-model checkpoint")
    shapes = [(n, d_k), (d_k, d_k), (d_k,), (d_k, d_h), (n * d_h, n), (n,)]
    arrays, offset = {}, head
    for name, shape in zip(PARAM_NAMES, shapes):
        count = int(np.prod(shape))
        if offset + 8 * count > len(data):
            raise ValidationError("checkpoint is truncated")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValidationError("checkpoint has trailing bytes")
    return SelectionModel(**arrays)
