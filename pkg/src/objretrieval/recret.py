"""Referring-expression comprehension as classification over cached proposals.

A query is answered by scoring every candidate box of an image in one
forward pass and decoding from those scores; no box coordinates are ever
generated.  A small two-layer scorer stands in for the language model: it
sees one candidate at a time (feature, query, their dot product and the
normalised box), so its output for a candidate never depends on the other
candidates or their order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .embedstore import EmbeddingStore, ImageCacheRecord
from .geometry import BBox, ScoredBox, iou, iou_matrix, nms_order, nms_indices, normalize_rows, pool_region_embeddings
from .probe import DivergenceError, focal_from_logits, soft_labels
from .rng import make_rng
from .synthworld import (
    REC_COLORS,
    REC_RELATIONS,
    ConceptEmbedder,
    CorpusSpec,
    ObjectAnnotation,
    SceneRecord,
    image_id_for,
    index_hierarchy,
    label_path,
    paint_grids,
    rec_world,
    sample_label,
)

BOX_FEATURES = 4


class InjectionError(AssertionError):
    """A ground truth ended up without any candidate at the required IoU."""


@dataclass(frozen=True)
class BoxPositionEncoding:
    """Sinusoidal encoding of normalised ``(cx, cy, w, h)``; a quarter of ``dim`` per coordinate."""

    dim: int
    scale: float = 0.1

    @property
    def bands(self) -> int:
        return self.dim // 8

    def encode(self, boxes: np.ndarray, extent: tuple[float, float]) -> np.ndarray:
        coords = normalized_box_features(boxes, extent)
        out = np.zeros((coords.shape[0], self.dim))
        nb = self.bands
        if nb == 0:
            return out
        freqs = math.pi * 2.0 ** np.arange(nb)
        for c in range(4):
            ang = coords[:, c : c + 1] * freqs[None, :]
            base = c * 2 * nb
            out[:, base : base + nb] = np.sin(ang)
            out[:, base + nb : base + 2 * nb] = np.cos(ang)
        return self.scale * out


def normalized_box_features(boxes: np.ndarray, extent: tuple[float, float]) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w, h = extent
    return np.stack(
        [(b[:, 0] + b[:, 2]) / (2 * w), (b[:, 1] + b[:, 3]) / (2 * h), (b[:, 2] - b[:, 0]) / w, (b[:, 3] - b[:, 1]) / h],
        axis=1,
    )


@dataclass
class CandidateList:
    image_id: str
    boxes: np.ndarray
    features: np.ndarray
    injected: np.ndarray
    extent: tuple[float, float]

    def __post_init__(self) -> None:
        n = self.boxes.shape[0]
        if self.features.shape[0] != n or self.injected.shape[0] != n:
            raise ValueError("candidate boxes, features and flags differ in length")

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def box(self, i: int) -> BBox:
        return BBox.from_seq(self.boxes[i])

    def take(self, order: Sequence[int]) -> "CandidateList":
        idx = np.asarray(order, dtype=np.int64)
        return CandidateList(self.image_id, self.boxes[idx], self.features[idx], self.injected[idx], self.extent)


@dataclass(frozen=True)
class RecQuery:
    text: str
    embedding: np.ndarray
    terms: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("query embedding must be finite")


@dataclass(frozen=True)
class RecTask:
    image_id: str
    query_text: str
    query_terms: tuple[str, ...]
    gt_boxes: tuple[BBox, ...]

    @property
    def negative(self) -> bool:
        return not self.gt_boxes

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "query_text": self.query_text,
            "query_terms": list(self.query_terms),
            "gt_boxes": [b.as_list() for b in self.gt_boxes],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RecTask":
        return cls(
            str(d["image_id"]),
            str(d["query_text"]),
            tuple(str(t) for t in d["query_terms"]),
            tuple(BBox.from_seq(b) for b in d["gt_boxes"]),
        )


def save_tasks(tasks: Iterable[RecTask], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_dict(), separators=(",", ":")) + "\n")


def load_tasks(path: str | Path) -> list[RecTask]:
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                tasks.append(RecTask.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"task file line {lineno}: {exc}") from exc
    return tasks


def assemble_candidates(
    record: SceneRecord,
    store_record: ImageCacheRecord,
    gts: Sequence[BBox],
    inject_iou: float = 0.5,
    encoding: BoxPositionEncoding | None = None,
) -> CandidateList:
    """Cached boxes plus any ground truth they fail to cover at ``inject_iou``.

    Features are pooled afresh from the scene grids, unit-normalised, and
    shifted by the box position encoding.
    """
    if store_record.image_id != record.image_id:
        raise ValueError(f"cache record {store_record.image_id!r} does not belong to {record.image_id!r}")
    cached = np.asarray(store_record.boxes, dtype=np.float64).reshape(-1, 4)
    extra = []
    if gts:
        g = np.array([b.as_list() for b in gts], dtype=np.float64)
        best = iou_matrix(g, cached).max(axis=1) if cached.shape[0] else np.zeros(len(gts))
        extra = [g[i] for i in range(len(gts)) if best[i] < inject_iou]
    boxes = np.concatenate([cached, np.array(extra).reshape(-1, 4)])
    injected = np.concatenate([np.zeros(cached.shape[0], dtype=bool), np.ones(len(extra), dtype=bool)])
    if boxes.shape[0]:
        feats = normalize_rows(pool_region_embeddings(record.grids, boxes))
    else:
        feats = np.zeros((0, record.grids[0].dim))
    if encoding is not None and boxes.shape[0]:
        feats = feats + encoding.encode(boxes, record.extent)
    return CandidateList(record.image_id, boxes, feats, injected, record.extent)


def check_injection(cands: CandidateList, gts: Sequence[BBox], min_iou: float = 0.5) -> None:
    if not gts or min_iou <= 0:
        return
    g = np.array([b.as_list() for b in gts], dtype=np.float64)
    best = iou_matrix(g, cands.boxes).max(axis=1) if len(cands) else np.zeros(len(gts))
    if np.any(best < min_iou):
        raise InjectionError(f"{cands.image_id}: {int((best < min_iou).sum())} ground truths lack a candidate at IoU {min_iou}")


def mine_hard_negatives(
    store_record: ImageCacheRecord,
    class_embeddings: Mapping[str, np.ndarray],
    present: Iterable[str],
    m: int = 3,
) -> list[str]:
    """The ``m`` absent classes the cached proposals respond to most strongly."""
    present = set(present)
    absent = sorted(c for c in class_embeddings if c not in present)
    if not absent:
        return []
    emb = np.asarray(store_record.embeddings, dtype=np.float64)
    if emb.shape[0] == 0:
        conf = {c: -math.inf for c in absent}
    else:
        conf = {c: float(np.max(emb @ np.asarray(class_embeddings[c], dtype=np.float64))) for c in absent}
    return sorted(absent, key=lambda c: (-conf[c], c))[:m]


@dataclass(frozen=True)
class RecTrainConfig:
    hidden: int = 16
    lr: float = 2.0
    momentum: float = 0.9
    epochs: int = 2000
    gamma: float = 2.0
    seed: int = 0
    inject_iou: float = 0.5
    init_scale: float = 0.5
    pos_scale: float = 0.1


class ToyScorer:
    """Two affine layers with a tanh between them, applied to each candidate independently.

    ``calls`` counts forward invocations so callers can verify the one-pass contract.
    """

    def __init__(self, dim: int, hidden: int, params: dict[str, np.ndarray], seed: int | None = None):
        self.dim = dim
        self.hidden = hidden
        self.seed = seed
        self.w1 = np.asarray(params["w1"], dtype=np.float64).reshape(hidden, input_size(dim))
        self.b1 = np.asarray(params["b1"], dtype=np.float64).reshape(hidden)
        self.w2 = np.asarray(params["w2"], dtype=np.float64).reshape(hidden)
        self.b2 = float(params["b2"])
        for name in ("w1", "b1", "w2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"scorer parameter {name} is not finite")
        self.calls = 0

    @classmethod
    def init(cls, dim: int, hidden: int, seed: int, scale: float = 0.5) -> "ToyScorer":
        rng = make_rng(seed, "rec-scorer-init")
        n_in = input_size(dim)
        params = {
            "w1": rng.standard_normal((hidden, n_in)) * (scale / math.sqrt(n_in)),
            "b1": np.zeros(hidden),
            "w2": rng.standard_normal(hidden) * (scale / math.sqrt(hidden)),
            "b2": 0.0,
        }
        return cls(dim, hidden, params, seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def with_flat(self, theta: np.ndarray) -> "ToyScorer":
        return ToyScorer(self.dim, self.hidden, unflatten(theta, self.dim, self.hidden), self.seed)

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Row-wise forward pass.

        Products are reduced along each row separately so that a candidate's
        logit is bit-identical wherever it sits in the batch.
        """
        self.calls += 1
        pre = (x[:, None, :] * self.w1[None, :, :]).sum(axis=2) + self.b1
        h = np.tanh(pre)
        return (h * self.w2).sum(axis=1) + self.b2

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "hidden": self.hidden,
            "seed": self.seed,
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ToyScorer":
        return cls(int(d["dim"]), int(d["hidden"]), {k: np.array(d[k]) for k in ("w1", "b1", "w2")} | {"b2": d["b2"]}, d.get("seed"))

    def save(self, path: str | Path, config: RecTrainConfig | None = None) -> None:
        d = self.to_dict()
        if config is not None:
            d["config"] = asdict(config)
        Path(path).write_text(json.dumps(d, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ToyScorer":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def input_size(dim: int) -> int:
    return 2 * dim + 1 + BOX_FEATURES


def unflatten(theta: np.ndarray, dim: int, hidden: int) -> dict[str, np.ndarray]:
    n_in = input_size(dim)
    i = hidden * n_in
    return {
        "w1": theta[:i].reshape(hidden, n_in),
        "b1": theta[i : i + hidden],
        "w2": theta[i + hidden : i + 2 * hidden],
        "b2": float(theta[-1]),
    }


def scorer_inputs(query: np.ndarray, cands: CandidateList) -> np.ndarray:
    """Per-candidate input rows ``[feature, query, feature . query, cx, cy, w, h]``."""
    q = np.asarray(query, dtype=np.float64)
    n = len(cands)
    if cands.features.shape[1] != q.shape[0]:
        raise ValueError(f"query dim {q.shape[0]} != candidate feature dim {cands.features.shape[1]}")
    dots = (cands.features * q).sum(axis=1, keepdims=True)
    return np.concatenate(
        [cands.features, np.broadcast_to(q, (n, q.shape[0])), dots, normalized_box_features(cands.boxes, cands.extent)],
        axis=1,
    )


def score_candidates(scorer: ToyScorer, query: RecQuery, cands: CandidateList) -> np.ndarray:
    """Scores in ``[0, 1]`` for every candidate, from a single scorer invocation."""
    if query.embedding.shape[0] != scorer.dim:
        raise ValueError(f"query dim {query.embedding.shape[0]} != scorer dim {scorer.dim}")
    z = scorer.logits(scorer_inputs(query.embedding, cands))
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def rec_objective(theta: np.ndarray, x: np.ndarray, y: np.ndarray, dim: int, hidden: int, gamma: float) -> tuple[float, np.ndarray]:
    """Mean soft focal loss of the scorer over rows ``x`` and its gradient."""
    p = unflatten(theta, dim, hidden)
    h = np.tanh(x @ p["w1"].T + p["b1"])
    z = h @ p["w2"] + p["b2"]
    loss, dz = focal_from_logits(z, y, gamma)
    g = dz / x.shape[0]
    dh = np.outer(g, p["w2"]) * (1.0 - h * h)
    grad = np.concatenate([(dh.T @ x).ravel(), dh.sum(axis=0), h.T @ g, [g.sum()]])
    return float(loss.mean()), grad


@dataclass
class RecTrainingSet:
    x: np.ndarray
    y: np.ndarray
    task_index: np.ndarray


def build_training_set(
    corpus: Mapping[str, SceneRecord],
    store: EmbeddingStore,
    tasks: Sequence[RecTask],
    embedder: ConceptEmbedder,
    cfg: RecTrainConfig = RecTrainConfig(),
) -> RecTrainingSet:
    """Candidate rows and soft IoU labels for every task; injection is verified per task."""
    enc = BoxPositionEncoding(embedder.dim, cfg.pos_scale)
    xs, ys, idx = [], [], []
    for ti, task in enumerate(tasks):
        rec = corpus[task.image_id]
        cands = assemble_candidates(rec, store.record(task.image_id), task.gt_boxes, cfg.inject_iou, enc)
        check_injection(cands, task.gt_boxes, min(cfg.inject_iou, 0.5))
        q = embedder.compose(task.query_terms)
        xs.append(scorer_inputs(q, cands))
        ys.append(soft_labels(cands.boxes, task.gt_boxes))
        idx.append(np.full(len(cands), ti))
    return RecTrainingSet(np.concatenate(xs), np.concatenate(ys), np.concatenate(idx))


def train_rec_scorer(
    corpus: Mapping[str, SceneRecord],
    store: EmbeddingStore,
    tasks: Sequence[RecTask],
    embedder: ConceptEmbedder,
    cfg: RecTrainConfig = RecTrainConfig(),
) -> tuple[ToyScorer, list[float]]:
    """Full-batch momentum descent on the soft focal loss over all (task, candidate) pairs."""
    if not any(t.negative for t in tasks):
        raise ValueError("training tasks must include negative queries")
    data = build_training_set(corpus, store, tasks, embedder, cfg)
    return fit_scorer(data, embedder.dim, cfg)


def fit_scorer(data: RecTrainingSet, dim: int, cfg: RecTrainConfig) -> tuple[ToyScorer, list[float]]:
    scorer = ToyScorer.init(dim, cfg.hidden, cfg.seed, cfg.init_scale)
    theta = scorer.flat()
    velocity = np.zeros_like(theta)
    losses = []
    for epoch in range(cfg.epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = rec_objective(theta, data.x, data.y, dim, cfg.hidden, cfg.gamma)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceError(epoch)
        losses.append(loss)
        if epoch == cfg.epochs:
            break
        velocity = cfg.momentum * velocity - cfg.lr * grad
        theta = theta + velocity
    return scorer.with_flat(theta), losses


def decode_rec(
    scores: np.ndarray,
    cands: CandidateList,
    mode: Literal["top1"] | tuple[Literal["threshold"], float] = "top1",
) -> list[ScoredBox]:
    """``"top1"`` keeps the argmax; ``("threshold", t)`` keeps every score >= t, best first."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != len(cands):
        raise ValueError("scores and candidates differ in length")
    if scores.size == 0:
        return []
    if mode == "top1":
        i = int(np.argmax(scores))
        return [ScoredBox(cands.box(i), float(scores[i]))]
    kind, t = mode
    if kind != "threshold":
        raise ValueError(f"unknown decode mode {mode!r}")
    order = sorted(np.flatnonzero(scores >= t).tolist(), key=lambda i: -scores[i])
    return [ScoredBox(cands.box(i), float(scores[i])) for i in order]


def merge_multiquery(
    per_query: Mapping[str, Sequence[ScoredBox]],
    nms_iou: float | None = None,
) -> list[tuple[str, ScoredBox]]:
    """Tag each query's detections with its label; optional per-label NMS.

    Output is ordered by label, then by descending score, so it does not
    depend on the order in which per-query results arrived.
    """
    out: list[tuple[str, ScoredBox]] = []
    for label in sorted(per_query):
        dets = list(per_query[label])
        if not dets:
            continue
        boxes = np.array([d.box.as_list() for d in dets])
        scores = np.array([d.score for d in dets])
        keep = nms_order(boxes, scores) if nms_iou is None else nms_indices(boxes, scores, nms_iou)
        out.extend((label, dets[i]) for i in keep)
    return out


# --- synthetic referring-expression scenes -------------------------------------------------


def rec_corpus_spec(n_images: int, seed: int = 0, dim: int = 64, noise_sigma: float = 0.0) -> CorpusSpec:
    return CorpusSpec(
        n_images=n_images,
        concepts=rec_world(),
        objects_per_image=(2, 4),
        dim=dim,
        seed=seed,
        noise_sigma=noise_sigma,
        extra_terms=REC_RELATIONS,
    )


def terms_for(concepts: Mapping, label: str) -> tuple[str, ...]:
    """Query terms naming ``label``: attributes first, then the category."""
    node = concepts[label]
    if node.attributes:
        return tuple(node.attributes) + (node.parent,)
    return (label,)


def _relation_halves(extent: tuple[float, float]) -> dict[str, tuple[float, float, float, float]]:
    w, h = extent
    return {"left": (0, 0, w / 2, h), "right": (w / 2, 0, w, h), "upper": (0, 0, w, h / 2), "lower": (0, h / 2, w, h)}


_OPPOSITE = {"left": "right", "right": "left", "upper": "lower", "lower": "upper"}


def _place(rng, spec: CorpusSpec, region, placed: list[BBox]) -> BBox | None:
    x0, y0, x1, y1 = region
    a = spec.align
    for _ in range(60):
        bw = int(rng.choice(spec.object_sizes))
        bh = int(rng.choice(spec.object_sizes))
        if max(bw, bh) > spec.max_aspect * min(bw, bh):
            continue
        nx = int((x1 - x0 - bw) // a)
        ny = int((y1 - y0 - bh) // a)
        if nx < 0 or ny < 0:
            continue
        x = x0 + a * int(rng.integers(0, nx + 1))
        y = y0 + a * int(rng.integers(0, ny + 1))
        box = BBox(float(x), float(y), float(x + bw), float(y + bh))
        if all(iou(box, o) <= spec.max_object_iou for o in placed):
            return box
    return None


def generate_rec_corpus(
    spec: CorpusSpec,
    policy: str = "last_two",
    start: int = 0,
) -> tuple[list[SceneRecord], list[RecTask]]:
    """Scenes built to support attribute and spatial-relation queries.

    Every scene holds a pair of identical instances in opposite halves (so
    only a relation word separates them) plus distractors sharing either the
    colour or the category.  Tasks: one relation query per twin, one
    attribute query per unique instance, and one label sampled from a random
    object's hierarchy under ``policy`` (all matching objects are its GT).
    """
    spec.validate()
    concepts = index_hierarchy(spec.concepts)
    cats = sorted({c.parent for c in spec.concepts if c.attributes})
    embedder = spec.embedder()
    scenes, tasks = [], []
    halves = _relation_halves(spec.extent)
    for i in range(start, start + spec.n_images):
        rng = make_rng(spec.seed, "rec-layout", i)
        image_id = image_id_for(i)
        cat = cats[int(rng.integers(len(cats)))]
        color = REC_COLORS[int(rng.integers(len(REC_COLORS)))]
        rel = ("left", "upper")[int(rng.integers(2))]
        twin = f"{color}_{cat}"
        placed: list[tuple[str, BBox]] = []
        for side in (rel, _OPPOSITE[rel]):
            box = _place(rng, spec, halves[side], [b for _, b in placed])
            if box is not None:
                placed.append((twin, box))
        other_color = [c for c in REC_COLORS if c != color][int(rng.integers(len(REC_COLORS) - 1))]
        other_cat = [c for c in cats if c != cat][int(rng.integers(len(cats) - 1))]
        lo, hi = spec.objects_per_image
        n_extra = int(rng.integers(max(lo - 2, 0), max(hi - 2, 0) + 1))
        distractors = [f"{other_color}_{cat}", f"{color}_{other_cat}"][:n_extra]
        for leaf in distractors:
            box = _place(rng, spec, (0, 0, *spec.extent), [b for _, b in placed])
            if box is not None:
                placed.append((leaf, box))
        objects = [ObjectAnnotation(b, label_path(concepts, leaf)) for leaf, b in placed]
        scenes.append(SceneRecord(image_id, (float(spec.extent[0]), float(spec.extent[1])), objects, paint_grids(spec, embedder, image_id, objects)))

        leaves = [o.leaf for o in objects]
        for o in objects:
            terms = terms_for(concepts, o.leaf)
            if leaves.count(o.leaf) == 1:
                tasks.append(RecTask(image_id, "the " + " ".join(terms), terms, (o.box,)))
            else:
                for side, (x0, y0, x1, y1) in halves.items():
                    cx, cy = o.box.center
                    if x0 <= cx < x1 and y0 <= cy < y1 and side in (rel, _OPPOSITE[rel]):
                        q = (side,) + terms
                        tasks.append(RecTask(image_id, f"the {' '.join(terms)} on the {side}", q, (o.box,)))
        if objects:
            pick = objects[int(rng.integers(len(objects)))]
            label = sample_label(pick, policy, rng)
            gts = tuple(o.box for o in objects if label in o.label_path)
            terms = terms_for(concepts, label)
            tasks.append(RecTask(image_id, "all " + " ".join(terms), terms, gts))
    return scenes, tasks


def hard_negative_tasks(
    corpus: Sequence[SceneRecord],
    store: EmbeddingStore,
    embedder: ConceptEmbedder,
    m: int = 3,
) -> list[RecTask]:
    """Negative queries: per image, the ``m`` absent leaf classes the cache responds to most."""
    concepts = embedder.concepts
    parents = {c.parent for c in concepts.values()}
    leaves = sorted(c for c in concepts if c not in parents)
    table = {c: embedder.embed(c) for c in leaves}
    out = []
    for rec in corpus:
        present = {o.leaf for o in rec.objects}
        for neg in mine_hard_negatives(store.record(rec.image_id), table, present, m):
            terms = terms_for(concepts, neg)
            out.append(RecTask(rec.image_id, "the " + " ".join(terms), terms, ()))
    return out


@dataclass
class RecEvaluation:
    top1: float
    n_single: int
    negative_mean: float | None
    positive_mean: float | None
    scorer_calls: int
    predictions: dict[int, ScoredBox] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "n_single_gt_tasks": self.n_single,
            "negative_mean_score": self.negative_mean,
            "positive_match_mean_score": self.positive_mean,
            "scorer_calls": self.scorer_calls,
        }


def evaluate_rec(
    scorer: ToyScorer,
    corpus: Mapping[str, SceneRecord],
    store: EmbeddingStore,
    tasks: Sequence[RecTask],
    embedder: ConceptEmbedder,
    pos_scale: float = 0.1,
    positive_iou: float = 0.5,
) -> RecEvaluation:
    """Held-out evaluation on cached candidates only (no ground-truth injection)."""
    from .metrics import top1_accuracy

    enc = BoxPositionEncoding(embedder.dim, pos_scale)
    calls0 = scorer.calls
    preds: dict[int, ScoredBox] = {}
    gts: dict[int, BBox] = {}
    neg_scores, pos_scores = [], []
    for ti, task in enumerate(tasks):
        cands = assemble_candidates(corpus[task.image_id], store.record(task.image_id), (), 0.5, enc)
        query = RecQuery(task.query_text, embedder.compose(task.query_terms), task.query_terms)
        scores = score_candidates(scorer, query, cands)
        if task.negative:
            neg_scores.extend(scores.tolist())
            continue
        labels = soft_labels(cands.boxes, task.gt_boxes)
        pos_scores.extend(scores[labels > positive_iou].tolist())
        if len(task.gt_boxes) == 1:
            gts[ti] = task.gt_boxes[0]
            top = decode_rec(scores, cands, "top1")
            if top:
                preds[ti] = top[0]
    return RecEvaluation(
        top1_accuracy(preds, gts),
        len(gts),
        float(np.mean(neg_scores)) if neg_scores else None,
        float(np.mean(pos_scores)) if pos_scores else None,
        scorer.calls - calls0,
        preds,
    )
