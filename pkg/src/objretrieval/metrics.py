"""Detection, proposal-recall and referring-expression metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .geometry import BBox, ScoredBox, iou, iou_matrix

AP_RECALL_POINTS = 101
# 0.50, 0.55, ..., 0.95 built from integers so the thresholds are the nearest doubles
AR_IOU_THRESHOLDS: tuple[float, ...] = tuple(i / 100 for i in range(50, 100, 5))


@dataclass(frozen=True)
class Detection:
    image_id: str
    label: str
    box: BBox
    score: float = 1.0

    def __post_init__(self) -> None:
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    label: str
    box: BBox


@dataclass
class APResult:
    per_class: dict[str, float]
    mean: float
    tp: int = 0
    fp: int = 0
    fn: int = 0


def _ranked(scores: Sequence[float]) -> list[int]:
    # stable: equal scores keep input order
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float) -> list[bool]:
    """Greedy one-to-one matching of single-class detections in descending score order.

    Each detection takes the unmatched ground truth of its image with the
    highest IoU (earliest ground truth on ties).  Returns TP flags in ranked
    order.
    """
    by_image: dict[str, list[int]] = {}
    for gi, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(gi)
    used = [False] * len(gts)
    flags = []
    for di in _ranked([d.score for d in dets]):
        d = dets[di]
        best, best_iou = -1, -1.0
        for gi in by_image.get(d.image_id, ()):
            if used[gi]:
                continue
            o = iou(d.box, gts[gi].box)
            if o >= iou_thresh and o > best_iou:
                best, best_iou = gi, o
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def interpolated_ap(tp_flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP from ranked TP flags.

    Recall levels are compared in integers (``100 * tp >= i * n_gt``) so that
    points such as recall 0.5 are never lost to rounding.
    """
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    flags = np.asarray(tp_flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, flags.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.arange(AP_RECALL_POINTS) * n_gt
    first = np.searchsorted(100 * tp, levels, side="left")
    sampled = np.where(first < flags.size, envelope[np.minimum(first, flags.size - 1)], 0.0)
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(sampled.tolist()) / AP_RECALL_POINTS


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5) -> APResult:
    """Per-class AP and their mean over classes that have ground truth."""
    classes = sorted({g.label for g in gts})
    per_class: dict[str, float] = {}
    tp = fp = fn = 0
    for c in classes:
        cg = [g for g in gts if g.label == c]
        cd = [d for d in dets if d.label == c]
        flags = match_detections(cd, cg, iou_thresh)
        per_class[c] = interpolated_ap(flags, len(cg))
        hits = int(sum(flags))
        tp += hits
        fp += len(flags) - hits
        fn += len(cg) - hits
    mean = math.fsum(per_class.values()) / len(per_class) if per_class else 0.0
    return APResult(per_class, mean, tp, fp, fn)


def coco_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth]) -> float:
    """Mean AP over IoU thresholds 0.50:0.05:0.95."""
    return float(np.mean([average_precision(dets, gts, t).mean for t in AR_IOU_THRESHOLDS]))


def _top_k(props: Sequence[ScoredBox], k: int) -> np.ndarray:
    order = _ranked([p.score for p in props])[:k]
    return np.array([props[i].box.as_list() for i in order], dtype=np.float64).reshape(-1, 4)


def _greedy_matched(ious: np.ndarray, thresh: float) -> int:
    """Proposals (rows, ranked) each take the best unmatched GT (column) at IoU >= thresh."""
    if ious.size == 0:
        return 0
    free = np.ones(ious.shape[1], dtype=bool)
    matched = 0
    for row in ious:
        cand = np.where(free & (row >= thresh), row, -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            free[j] = False
            matched += 1
            if not free.any():
                break
    return matched


def recall_at(
    proposals: Mapping[str, Sequence[ScoredBox]],
    gts: Mapping[str, Sequence[BBox]],
    k: int,
    thresholds: Sequence[float] = AR_IOU_THRESHOLDS,
) -> np.ndarray:
    """Matched-GT fraction at each IoU threshold using the top-``k`` proposals per image."""
    total = sum(len(v) for v in gts.values())
    matched = np.zeros(len(thresholds))
    if total == 0:
        return matched
    for image_id, gt_boxes in gts.items():
        if not gt_boxes:
            continue
        boxes = _top_k(proposals.get(image_id, ()), k)
        ious = iou_matrix(boxes, np.array([b.as_list() for b in gt_boxes]))
        for ti, t in enumerate(thresholds):
            matched[ti] += _greedy_matched(ious, t)
    return matched / total


def average_recall(
    proposals: Mapping[str, Sequence[ScoredBox]],
    gts: Mapping[str, Sequence[BBox]],
    k: int,
) -> tuple[float, float]:
    """``(AR at IoU 0.5, AR averaged over 0.50:0.05:0.95)`` with ``k`` proposals per image."""
    r = recall_at(proposals, gts, k)
    return float(r[0]), float(r.mean())


def top1_accuracy(
    predictions: Mapping[Hashable, ScoredBox | None],
    gts: Mapping[Hashable, BBox],
    iou_thresh: float = 0.5,
) -> float:
    """Fraction of tasks whose single prediction overlaps the single GT at ``iou_thresh``."""
    if not gts:
        return 0.0
    hits = 0
    for task, gt in gts.items():
        pred = predictions.get(task)
        if pred is not None and iou(pred.box, gt) >= iou_thresh:
            hits += 1
    return hits / len(gts)


@dataclass
class EvalReport:
    ap: dict[str, float] | None = None
    ap_mean: float | None = None
    ar: dict[int, tuple[float, float]] = field(default_factory=dict)
    top1: float | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict = {"counts": dict(self.counts)}
        if self.ap is not None:
            out["ap"] = {"per_class": dict(self.ap), "mean": self.ap_mean}
        if self.ar:
            out["ar"] = {str(k): {"ar50": v[0], "ar": v[1]} for k, v in sorted(self.ar.items())}
        if self.top1 is not None:
            out["top1"] = self.top1
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)
