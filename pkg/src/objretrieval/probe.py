"""Linear objectness probing over frozen region embeddings.

A probe is one learnable direction plus a logit scale and bias.  It is
trained with a focal loss whose targets are soft IoU labels, and then used to
rank dense anchors into a short list of class-agnostic proposals whose
embeddings remain class-specific.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import BBox, FeatureGrid, ScoredBox, iou_matrix, nms_indices, normalize_rows, pool_region_embeddings
from .rng import make_rng

DEFAULT_SCALES: tuple[float, ...] = (4.0, 6.0, 8.0)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class ObjectnessProbe:
    weight: np.ndarray
    scale: float = 1.0
    bias: float = 0.0
    trained_epochs: int = 0
    seed: int | None = None

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if not np.all(np.isfinite(self.weight)):
            raise ValueError("probe weight must be finite")

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def unit_weight(self) -> np.ndarray:
        n = np.linalg.norm(self.weight)
        if n == 0:
            raise ValueError("probe weight has zero norm")
        return self.weight / n

    def scores(self, embeddings: np.ndarray) -> np.ndarray:
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape[-1] != self.dim:
            raise ValueError(f"embedding dim {embeddings.shape[-1]} != probe dim {self.dim}")
        return _sigmoid(self.scale * (embeddings @ self.unit_weight()) + self.bias)

    def to_json(self) -> str:
        return json.dumps(
            {
                "dim": self.dim,
                "weight": self.weight.tolist(),
                "scale": self.scale,
                "bias": self.bias,
                "trained_epochs": self.trained_epochs,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ObjectnessProbe":
        d = json.loads(text)
        probe = cls(np.array(d["weight"], dtype=np.float64), d["scale"], d["bias"], d["trained_epochs"], d["seed"])
        if probe.dim != d["dim"]:
            raise ValueError(f"probe declares dim {d['dim']} but weight has {probe.dim}")
        return probe

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ObjectnessProbe":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class ProbeTrainConfig:
    lr: float = 0.5
    momentum: float = 0.9
    epochs: int = 300
    gamma: float = 2.0
    seed: int = 0
    positive_iou: float = 0.5

    def validate(self) -> None:
        vals = (self.lr, self.momentum, self.gamma, self.positive_iou)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("probe config values must be finite")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.gamma < 0 or self.epochs < 0:
            raise ValueError(f"invalid probe config {self}")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def probe_score(probe: ObjectnessProbe, embedding: np.ndarray) -> float:
    return float(probe.scores(np.asarray(embedding)[None, :])[0])


def soft_focal_loss(p: float, y: float, gamma: float = 2.0) -> float:
    """``|y - p|**gamma * BCE(p, y)`` for a probability ``p`` and soft target ``y``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie strictly inside (0, 1), got {p}")
    bce = -y * math.log(p) - (1.0 - y) * math.log1p(-p)
    return abs(y - p) ** gamma * bce


def focal_from_logits(z: np.ndarray, y: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise soft focal loss and its derivative with respect to the logit."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = _sigmoid(z)
    bce = np.logaddexp(0.0, z) - y * z
    d = p - y
    ad = np.abs(d)
    mod = ad**gamma
    if gamma == 0:
        dmod = np.zeros_like(d)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(ad > 0, gamma * ad ** (gamma - 1.0) * np.sign(d), 0.0)
    grad = dmod * p * (1.0 - p) * bce + mod * d
    return mod * bce, grad


def soft_labels(proposal_boxes: Sequence[BBox] | np.ndarray, gt_boxes: Sequence[BBox] | np.ndarray) -> np.ndarray:
    """Best IoU of every proposal against any ground truth (zeros without ground truth)."""
    p = _as_boxes(proposal_boxes)
    g = _as_boxes(gt_boxes)
    if g.shape[0] == 0:
        return np.zeros(p.shape[0])
    return iou_matrix(p, g).max(axis=1)


def _as_boxes(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    return np.array([b.as_list() for b in boxes], dtype=np.float64).reshape(-1, 4)


# Trainable parameter vector layout: [weight (dim), log_scale, bias].


def pack(probe: ObjectnessProbe) -> np.ndarray:
    if probe.scale <= 0:
        raise ValueError("training requires a positive scale")
    return np.concatenate([probe.weight, [math.log(probe.scale), probe.bias]])


def unpack(theta: np.ndarray, **meta) -> ObjectnessProbe:
    return ObjectnessProbe(theta[:-2].copy(), float(math.exp(theta[-2])), float(theta[-1]), **meta)


def probe_objective(theta: np.ndarray, x: np.ndarray, y: np.ndarray, gamma: float) -> tuple[float, np.ndarray]:
    """Mean soft focal loss over ``(x, y)`` and its gradient with respect to ``theta``."""
    w = theta[:-2]
    log_s, b = theta[-2], theta[-1]
    s = math.exp(log_s)
    n = np.linalg.norm(w)
    if n == 0:
        raise ValueError("probe weight has zero norm")
    u = w / n
    c = x @ u
    z = s * c + b
    loss, dz = focal_from_logits(z, y, gamma)
    m = x.shape[0]
    g = dz / m
    du = s * (x.T @ g)
    dw = (du - u * (u @ du)) / n
    grad = np.concatenate([dw, [s * float(g @ c), float(g.sum())]])
    return float(loss.mean()), grad


def init_probe(dim: int, seed: int) -> ObjectnessProbe:
    rng = make_rng(seed, "probe-init")
    return ObjectnessProbe(rng.standard_normal(dim) / math.sqrt(dim), 1.0, 0.0, 0, seed)


def train_probe(
    embeddings: np.ndarray,
    labels: np.ndarray,
    cfg: ProbeTrainConfig = ProbeTrainConfig(),
    init: ObjectnessProbe | None = None,
) -> tuple[ObjectnessProbe, list[float]]:
    """Full-batch momentum descent on the mean soft focal loss.

    Returns the final parameters and the loss recorded before every update,
    followed by the loss of the returned parameters.
    """
    cfg.validate()
    x = normalize_rows(embeddings)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("embeddings and labels differ in length")
    if not (np.any(y > cfg.positive_iou) and np.any(y < cfg.positive_iou)):
        raise ValueError("training needs labels on both sides of positive_iou")
    probe = init if init is not None else init_probe(x.shape[1], cfg.seed)
    if probe.dim != x.shape[1]:
        raise ValueError(f"probe dim {probe.dim} != embedding dim {x.shape[1]}")
    theta = pack(probe)
    velocity = np.zeros_like(theta)
    losses: list[float] = []
    for epoch in range(cfg.epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = probe_objective(theta, x, y, cfg.gamma)
        if not math.isfinite(loss):
            raise DivergenceError(epoch)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(epoch, "gradient")
        losses.append(loss)
        if epoch == cfg.epochs:
            break
        velocity = cfg.momentum * velocity - cfg.lr * grad
        theta = theta + velocity
    return unpack(theta, trained_epochs=probe.trained_epochs + cfg.epochs, seed=cfg.seed), losses


def dense_anchors(extent: tuple[float, float], stride: float, scales: Sequence[float]) -> np.ndarray:
    """Square anchors centred on every interior stride-spaced grid point, clipped to the extent.

    Centres sit on cell corners, so even-sized anchors align with boxes whose
    corners are on the even lattice.  Order: scale-major, then row, then column.
    """
    if stride < 1:
        raise ValueError("stride must be at least 1")
    if not scales:
        raise ValueError("at least one anchor scale is required")
    w, h = extent
    cx = np.arange(1, int(w // stride)) * float(stride)
    cy = np.arange(1, int(h // stride)) * float(stride)
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    xx, yy = xx.ravel(), yy.ravel()
    out = []
    for s in scales:
        half = 0.5 * float(s)
        out.append(np.stack([xx - half, yy - half, xx + half, yy + half], axis=1))
    a = np.concatenate(out)
    a[:, [0, 2]] = np.clip(a[:, [0, 2]], 0.0, w)
    a[:, [1, 3]] = np.clip(a[:, [1, 3]], 0.0, h)
    return a


def grid_extent(grids: Sequence[FeatureGrid]) -> tuple[float, float]:
    g = grids[0]
    return (g.width * g.stride, g.height * g.stride)


def anchor_embeddings(grids: Sequence[FeatureGrid], stride: float = 1, scales: Sequence[float] = DEFAULT_SCALES) -> tuple[np.ndarray, np.ndarray]:
    anchors = dense_anchors(grid_extent(grids), stride, scales)
    return anchors, normalize_rows(pool_region_embeddings(grids, anchors))


def propose_arrays(
    grids: Sequence[FeatureGrid],
    probe: ObjectnessProbe,
    stride: float = 1,
    scales: Sequence[float] = DEFAULT_SCALES,
    nms_iou: float = 0.5,
    k: int = 100,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``k`` proposals as ``(boxes, scores, unit embeddings)`` arrays."""
    if k < 0:
        raise ValueError("k must be non-negative")
    anchors, emb = anchor_embeddings(grids, stride, scales)
    scores = probe.scores(emb)
    keep = nms_indices(anchors, scores, nms_iou, max_keep=k)
    return anchors[keep], scores[keep], emb[keep]


def propose(
    grids: Sequence[FeatureGrid],
    probe: ObjectnessProbe,
    stride: float = 1,
    scales: Sequence[float] = DEFAULT_SCALES,
    nms_iou: float = 0.5,
    k: int = 100,
) -> list[ScoredBox]:
    boxes, scores, _ = propose_arrays(grids, probe, stride, scales, nms_iou, k)
    return [ScoredBox(BBox.from_seq(b), float(s)) for b, s in zip(boxes, scores)]


def probe_training_set(
    corpus: Sequence,
    stride: float = 1,
    scales: Sequence[float] = DEFAULT_SCALES,
) -> tuple[np.ndarray, np.ndarray]:
    """Anchor embeddings and soft IoU labels for every scene in ``corpus``."""
    xs, ys = [], []
    for rec in corpus:
        anchors, emb = anchor_embeddings(rec.grids, stride, scales)
        xs.append(emb)
        ys.append(soft_labels(anchors, [o.box for o in rec.objects]))
    return np.concatenate(xs), np.concatenate(ys)


def oracle_probe(embedder, concepts: Sequence[str], scale: float = 20.0) -> ObjectnessProbe:
    """Hand-built probe pointing at the mean object direction and away from background."""
    from .synthworld import BACKGROUND

    mean_obj = np.mean([embedder.embed(c) for c in concepts], axis=0)
    mean_obj = mean_obj / np.linalg.norm(mean_obj)
    w = mean_obj - embedder.embed(BACKGROUND)
    u = w / np.linalg.norm(w)
    bg_cos = float(embedder.embed(BACKGROUND) @ u)
    obj_cos = min(float(embedder.embed(c) @ u) for c in concepts)
    return ObjectnessProbe(w, scale, -scale * 0.5 * (bg_cos + obj_cos))
