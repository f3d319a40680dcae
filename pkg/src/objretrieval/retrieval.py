"""Object retrieval over the proposal cache, and its P/R/F1 evaluation.

An image is retrieved for a concept when its best-matching cached proposal
has cosine similarity at or above the query threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .embedstore import EmbeddingStore, score_all
from .geometry import BBox, nms_indices
from .metrics import Detection

DEFAULT_THRESHOLD = 0.2


@dataclass(frozen=True)
class QuerySpec:
    concept: str
    embedding: np.ndarray
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        n = float(np.linalg.norm(self.embedding))
        if abs(n - 1.0) > 1e-4:
            raise ValueError(f"query embedding for {self.concept!r} has norm {n}, expected 1")


@dataclass(frozen=True)
class RetrievalResult:
    concept: str
    images: frozenset[str]
    per_image_max: dict[str, float]
    threshold: float


@dataclass(frozen=True)
class ClassScores:
    precision: float | None
    recall: float
    f1: float | None


@dataclass
class RetrievalReport:
    per_class: dict[str, ClassScores]
    macro: ClassScores
    federated: bool = False
    threshold: float | None = None

    def to_dict(self) -> dict:
        def row(s: ClassScores) -> dict:
            if self.federated:
                return {"r": s.recall}
            return {"p": s.precision, "r": s.recall, "f1": s.f1}

        return {
            "per_class": {c: row(s) for c, s in sorted(self.per_class.items())},
            "macro": row(self.macro),
            "federated": self.federated,
            "threshold": self.threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def per_image_max(store: EmbeddingStore, query: np.ndarray) -> dict[str, float]:
    """Best proposal score of every image; images without proposals are omitted."""
    scores = score_all(store, query)
    out: dict[str, float] = {}
    for i, iid in enumerate(store.image_ids):
        lo, hi = store.offsets[i], store.offsets[i + 1]
        if hi > lo:
            out[iid] = float(scores[lo:hi].max())
    return out


def retrieve(store: EmbeddingStore, query: QuerySpec) -> RetrievalResult:
    maxima = per_image_max(store, query.embedding)
    hits = frozenset(iid for iid, s in maxima.items() if s >= query.threshold)
    return RetrievalResult(query.concept, hits, maxima, query.threshold)


def class_scores(pred: set[str] | frozenset[str], gt: set[str] | frozenset[str]) -> ClassScores:
    """P/R/F1 for one class.

    Empty prediction and empty ground truth scores 1/1/1.  Otherwise an empty
    side yields 0 precision (nothing predicted) or vacuous recall 1 (nothing
    to find).
    """
    pred, gt = set(pred), set(gt)
    if not pred and not gt:
        return ClassScores(1.0, 1.0, 1.0)
    tp = len(pred & gt)
    p = tp / len(pred) if pred else 0.0
    r = tp / len(gt) if gt else 1.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return ClassScores(p, r, f1)


def evaluate_retrieval(
    results: Mapping[str, RetrievalResult],
    gt: Mapping[str, set[str] | frozenset[str]],
    federated: bool = False,
) -> RetrievalReport:
    """Per-class scores, then their unweighted mean over classes with ground truth.

    Classes without ground truth still get a per-class row.  ``federated``
    keeps recall only.
    """
    missing = sorted(set(results) - set(gt))
    if missing:
        raise KeyError(f"concepts without ground truth: {missing}")
    per_class: dict[str, ClassScores] = {}
    for concept, res in results.items():
        s = class_scores(res.images, gt[concept])
        per_class[concept] = ClassScores(None, s.recall, None) if federated else s
    thresholds = {r.threshold for r in results.values()}
    threshold = thresholds.pop() if len(thresholds) == 1 else None
    if not per_class:
        return RetrievalReport({}, ClassScores(None if federated else 0.0, 0.0, None if federated else 0.0), federated, threshold)
    vals = [per_class[c] for c in per_class if gt[c]]
    if not vals:
        vals = list(per_class.values())
    recall = float(np.mean([v.recall for v in vals]))
    if federated:
        macro = ClassScores(None, recall, None)
    else:
        macro = ClassScores(float(np.mean([v.precision for v in vals])), recall, float(np.mean([v.f1 for v in vals])))
    return RetrievalReport(per_class, macro, federated, threshold)


def retrieval_ground_truth(corpus: Sequence, concepts: Sequence[str]) -> dict[str, set[str]]:
    """Images whose annotations carry each concept anywhere in a label path."""
    gt: dict[str, set[str]] = {c: set() for c in concepts}
    for rec in corpus:
        for obj in rec.objects:
            for label in obj.label_path:
                if label in gt:
                    gt[label].add(rec.image_id)
    return gt


def detect(
    store: EmbeddingStore,
    class_embeddings: Mapping[str, np.ndarray],
    min_similarity: float = DEFAULT_THRESHOLD,
    nms_iou: float = 0.5,
) -> list[Detection]:
    """Open-vocabulary detection on cached proposals.

    Each proposal is labelled with its highest-dot-product class; its score is
    that similarity times the proposal's objectness.  Per-class NMS follows.
    """
    names = sorted(class_embeddings)
    if not names:
        return []
    table = np.stack([np.asarray(class_embeddings[n], dtype=np.float64) for n in names])
    sims = store.embeddings64 @ table.T
    best = np.argmax(sims, axis=1)
    best_sim = sims[np.arange(sims.shape[0]), best]
    dets: list[Detection] = []
    for i, iid in enumerate(store.image_ids):
        lo, hi = store.offsets[i], store.offsets[i + 1]
        boxes = store.boxes[lo:hi].astype(np.float64)
        obj = store.objectness[lo:hi].astype(np.float64)
        for ci, name in enumerate(names):
            sel = np.flatnonzero((best[lo:hi] == ci) & (best_sim[lo:hi] >= min_similarity))
            if sel.size == 0:
                continue
            scores = best_sim[lo:hi][sel] * obj[sel]
            for j in nms_indices(boxes[sel], scores, nms_iou):
                dets.append(Detection(iid, name, BBox.from_seq(boxes[sel][j]), float(scores[j])))
    return dets
