"""Procedural scenes with hierarchical labels and a deterministic concept embedder.

The embedder plays the part of a frozen text tower: every concept maps to a
fixed unit vector.  Scenes paint the embedding of each object's finest label
into every feature grid, so pooled region features are class-specific in the
same way a frozen detector's box embeddings are.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .geometry import BBox, FeatureGrid, iou
from .rng import derive_seed, make_rng

BACKGROUND = "background"
PART_TERMS: tuple[str, ...] = ("part_x", "part_y", "side_x", "side_y")
LabelPolicy = Literal["uniform_all", "last_two"]
LABEL_POLICIES: tuple[str, ...] = ("uniform_all", "last_two")
MAX_DEPTH = 3


class ConfigError(ValueError):
    pass


class AnnotationParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class AnnotationValidationError(ValueError):
    def __init__(self, image_id: str, message: str):
        super().__init__(f"image {image_id!r}: {message}")
        self.image_id = image_id


@dataclass(frozen=True)
class ConceptNode:
    """One label in the hierarchy.

    Nodes with ``attributes`` are instance-level descriptions ("a red car");
    their embedding is composed from their ancestors and attribute terms
    instead of drawn independently.
    """

    id: str
    name: str
    parent: str | None = None
    embedding_seed: int = 0
    attributes: tuple[str, ...] = ()


@dataclass(frozen=True)
class ObjectAnnotation:
    box: BBox
    label_path: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.label_path:
            raise ValueError("label_path must be non-empty")

    @property
    def leaf(self) -> str:
        return self.label_path[-1]


@dataclass
class SceneRecord:
    image_id: str
    extent: tuple[float, float]
    objects: list[ObjectAnnotation]
    grids: list[FeatureGrid] = field(default_factory=list, compare=False, repr=False)

    @property
    def width(self) -> float:
        return self.extent[0]

    @property
    def height(self) -> float:
        return self.extent[1]


def node(id: str, parent: str | None = None, *, attributes: Sequence[str] = (), name: str | None = None) -> ConceptNode:
    return ConceptNode(
        id=id,
        name=name or id.replace("_", " "),
        parent=parent,
        embedding_seed=derive_seed(0, "concept-id", id) & 0x7FFFFFFF,
        attributes=tuple(attributes),
    )


def default_world() -> tuple[ConceptNode, ...]:
    """Eight leaf categories under three roots, depth at most three."""
    return (
        node("animal"),
        node("dog", "animal"),
        node("terrier", "dog"),
        node("cat", "animal"),
        node("bird", "animal"),
        node("vehicle"),
        node("car", "vehicle"),
        node("bus", "vehicle"),
        node("bicycle", "vehicle"),
        node("furniture"),
        node("chair", "furniture"),
        node("table", "furniture"),
        node("desk", "table"),
    )


REC_COLORS: tuple[str, ...] = ("red", "blue", "green")
REC_RELATIONS: tuple[str, ...] = ("left", "right", "upper", "lower")


def rec_world() -> tuple[ConceptNode, ...]:
    """Category x colour instances ("red car") for referring-expression tasks."""
    nodes = [node("vehicle"), node("animal")]
    for cat, root in (("car", "vehicle"), ("bus", "vehicle"), ("dog", "animal"), ("cat", "animal")):
        nodes.append(node(cat, root))
        for color in REC_COLORS:
            nodes.append(node(f"{color}_{cat}", cat, attributes=(color,), name=f"a {color} {cat}"))
    return tuple(nodes)


def index_hierarchy(concepts: Sequence[ConceptNode]) -> dict[str, ConceptNode]:
    """Validate that ``concepts`` form a forest of depth <= 3 and index them by id."""
    by_id: dict[str, ConceptNode] = {}
    for c in concepts:
        if c.id in by_id:
            raise ConfigError(f"duplicate concept id {c.id!r}")
        by_id[c.id] = c
    for c in concepts:
        seen = {c.id}
        cur, depth = c, 1
        while cur.parent is not None:
            if cur.parent not in by_id:
                raise ConfigError(f"concept {cur.id!r} has unknown parent {cur.parent!r}")
            cur = by_id[cur.parent]
            if cur.id in seen:
                raise ConfigError(f"cycle through concept {cur.id!r}")
            seen.add(cur.id)
            depth += 1
        if depth > MAX_DEPTH:
            raise ConfigError(f"concept {c.id!r} is nested deeper than {MAX_DEPTH}")
    return by_id


def label_path(concepts: Mapping[str, ConceptNode], leaf: str) -> tuple[str, ...]:
    path = [leaf]
    while concepts[path[-1]].parent is not None:
        path.append(concepts[path[-1]].parent)
    return tuple(reversed(path))


def leaf_ids(concepts: Sequence[ConceptNode]) -> list[str]:
    parents = {c.parent for c in concepts}
    return [c.id for c in concepts if c.id not in parents]


def sample_label(ann: ObjectAnnotation, policy: LabelPolicy, rng: np.random.Generator) -> str:
    """Pick one training label for an object from its coarse-to-fine path."""
    path = ann.label_path
    if policy == "uniform_all":
        pool = path
    elif policy == "last_two":
        pool = path[-2:]
    else:
        raise ValueError(f"unknown label policy {policy!r}")
    return pool[int(rng.integers(len(pool)))]


class ConceptEmbedder:
    """Deterministic unit embeddings for concepts and free vocabulary terms.

    Plain concepts and terms start from independent Gaussian directions keyed
    by ``(seed, embedding_seed)``.  When they fit in ``dim`` they are then
    orthonormalised by Gram-Schmidt in sorted-key order, so distinct base
    tokens have exactly zero cosine; otherwise the raw directions are used.
    Attributed concepts are the normalised sum of their ancestors' vectors
    and their attribute terms.
    """

    def __init__(
        self,
        dim: int,
        seed: int,
        concepts: Sequence[ConceptNode],
        terms: Iterable[str] = (),
        noise_sigma: float = 0.0,
    ):
        if dim < 1:
            raise ConfigError("embedding dim must be positive")
        if noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        self.dim = dim
        self.seed = seed
        self.noise_sigma = noise_sigma
        self.concepts = index_hierarchy(concepts)
        self.terms = {BACKGROUND, *PART_TERMS, *terms}
        for c in concepts:
            self.terms.update(c.attributes)
        clash = self.terms & set(self.concepts)
        if clash:
            raise ConfigError(f"terms collide with concept ids: {sorted(clash)}")
        self._cache: dict[str, np.ndarray] = {}
        self._basis: dict[str, np.ndarray] | None = None

    @property
    def vocabulary(self) -> list[str]:
        return sorted(set(self.concepts) | self.terms)

    def _base_keys(self) -> list[str]:
        return sorted({k for k, c in self.concepts.items() if not c.attributes} | self.terms)

    def _raw(self, key: str) -> np.ndarray:
        if self._basis is None:
            keys = self._base_keys()
            raw = np.stack([self._draw_raw(k) for k in keys])
            if len(keys) <= self.dim:
                q, r = np.linalg.qr(raw.T)
                raw = (q * np.sign(np.diag(r))).T
            self._basis = dict(zip(keys, raw))
        return self._basis[key]

    def _draw_raw(self, key: str) -> np.ndarray:
        if key in self.concepts:
            rng = make_rng(self.seed, "concept", self.concepts[key].embedding_seed)
        else:
            rng = make_rng(self.seed, "term", key)
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed(self, token: str) -> np.ndarray:
        if token in self._cache:
            return self._cache[token].copy()
        if token in self.concepts:
            c = self.concepts[token]
            if c.attributes:
                parts = [self._raw(a) for a in label_path(self.concepts, c.parent)] if c.parent else []
                parts += [self._raw(t) for t in c.attributes]
                v = np.sum(parts, axis=0)
                v = v / np.linalg.norm(v)
            else:
                v = self._raw(token)
        elif token in self.terms:
            v = self._raw(token)
        else:
            raise KeyError(f"unknown concept or term {token!r}")
        self._cache[token] = v
        return v.copy()

    def compose(self, terms: Sequence[str]) -> np.ndarray:
        """Unit-normalised sum of term embeddings (query composition)."""
        if not terms:
            raise ValueError("cannot compose an empty term list")
        v = np.sum([self.embed(t) for t in terms], axis=0)
        n = np.linalg.norm(v)
        if n == 0:
            raise ValueError(f"terms {list(terms)} cancel out")
        return v / n

    def draw(self, token: str, index: int) -> np.ndarray:
        """Noisy unit embedding, deterministic for ``(token, seed, index)``."""
        v = self.embed(token)
        if self.noise_sigma > 0:
            rng = make_rng(self.seed, "draw", token, index)
            v = v + rng.standard_normal(self.dim) * (self.noise_sigma / math.sqrt(self.dim))
        return v / np.linalg.norm(v)


def embed_concept(embedder: ConceptEmbedder, concept: str) -> np.ndarray:
    return embedder.embed(concept)


@dataclass(frozen=True)
class CorpusSpec:
    """Generator configuration.

    Object boxes are snapped to multiples of ``align``; keeping ``align`` equal
    to the coarsest stride makes noiseless pooled object features exact.
    ``noise_sigma`` is the expected norm of the per-cell noise vector.
    ``part_scale`` weights the within-object position code (see :func:`paint_grids`).
    """

    n_images: int
    concepts: tuple[ConceptNode, ...] = field(default_factory=default_world)
    objects_per_image: tuple[int, int] = (1, 4)
    dim: int = 64
    seed: int = 0
    noise_sigma: float = 0.0
    extent: tuple[int, int] = (24, 24)
    object_sizes: tuple[int, ...] = (4, 6, 8)
    strides: tuple[int, ...] = (1, 2)
    align: int = 2
    max_object_iou: float = 0.0
    max_aspect: float = 1.5
    part_scale: float = 2.0
    extra_terms: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.n_images < 1:
            raise ConfigError("n_images must be at least 1")
        if not self.concepts:
            raise ConfigError("concept set is empty")
        index_hierarchy(self.concepts)
        if self.dim < 4:
            raise ConfigError("dim must be at least 4")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad objects_per_image range {self.objects_per_image}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        w, h = self.extent
        if any(s <= 0 for s in self.strides) or any(w % s or h % s for s in self.strides):
            raise ConfigError("every stride must divide the extent")
        if not self.object_sizes or max(self.object_sizes) > min(w, h):
            raise ConfigError("object sizes must fit inside the extent")
        if self.max_aspect < 1:
            raise ConfigError("max_aspect must be at least 1")

    def embedder(self) -> ConceptEmbedder:
        return ConceptEmbedder(self.dim, self.seed, self.concepts, self.extra_terms, self.noise_sigma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["concepts"] = [asdict(c) for c in self.concepts]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CorpusSpec":
        d = dict(d)
        d["concepts"] = tuple(
            ConceptNode(**{**c, "attributes": tuple(c.get("attributes", ()))}) for c in d["concepts"]
        )
        for key in ("objects_per_image", "extent", "object_sizes", "strides", "extra_terms"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def image_id_for(index: int) -> str:
    return f"img{index:05d}"


def sample_layout(spec: CorpusSpec, index: int, leaves: Sequence[str] | None = None) -> list[tuple[str, BBox]]:
    """Draw ``(leaf, box)`` pairs for image ``index``; boxes are rejection-sampled against overlap."""
    leaves = list(leaves) if leaves is not None else leaf_ids(spec.concepts)
    rng = make_rng(spec.seed, "layout", index)
    lo, hi = spec.objects_per_image
    n = int(rng.integers(lo, hi + 1))
    w_ext, h_ext = spec.extent
    placed: list[tuple[str, BBox]] = []
    for _ in range(n):
        leaf = leaves[int(rng.integers(len(leaves)))]
        for _attempt in range(50):
            bw = int(rng.choice(spec.object_sizes))
            bh = int(rng.choice(spec.object_sizes))
            if max(bw, bh) > spec.max_aspect * min(bw, bh):
                continue
            x = spec.align * int(rng.integers(0, (w_ext - bw) // spec.align + 1))
            y = spec.align * int(rng.integers(0, (h_ext - bh) // spec.align + 1))
            box = BBox(float(x), float(y), float(x + bw), float(y + bh))
            if all(iou(box, other) <= spec.max_object_iou for _, other in placed):
                placed.append((leaf, box))
                break
    return placed


def paint_grids(
    spec: CorpusSpec,
    embedder: ConceptEmbedder,
    image_id: str,
    objects: Sequence[ObjectAnnotation],
) -> list[FeatureGrid]:
    """Render one grid per stride.  Later objects overwrite earlier ones (painter's order).

    An object cell holds its leaf embedding plus a part code
    ``part_scale * ((|u| - 1/2) e_px + u e_sx + (|v| - 1/2) e_py + v e_sy)``,
    where ``(u, v)`` is the cell centre relative to the object centre in
    half-extents.  The code is linear on each side of the centre, so 2x2
    pooling of the tight object box (samples at its quarter points) sees
    exactly zero and returns the bare leaf embedding.  Any other box lying
    inside the object pools a nonzero code: an off-centre box through the
    signed terms, a centred smaller box through the absolute ones.
    """
    w_ext, h_ext = spec.extent
    bg = embedder.embed(BACKGROUND)
    part_x, part_y, side_x, side_y = (embedder.embed(t) for t in PART_TERMS)
    grids = []
    for gi, stride in enumerate(spec.strides):
        gh, gw = h_ext // stride, w_ext // stride
        cy = (np.arange(gh) + 0.5) * stride
        cx = (np.arange(gw) + 0.5) * stride
        owner = np.full((gh, gw), -1, dtype=np.int64)
        for k, obj in enumerate(objects):
            b = obj.box
            rows = (cy >= b.y1) & (cy < b.y2)
            cols = (cx >= b.x1) & (cx < b.x2)
            owner[np.ix_(rows, cols)] = k
        palette = np.stack([bg] + [embedder.embed(o.leaf) for o in objects])
        values = palette[owner + 1]
        if spec.part_scale and objects:
            for k, obj in enumerate(objects):
                mask = owner == k
                if not mask.any():
                    continue
                b = obj.box
                ox, oy = b.center
                u = (cx - ox) / (0.5 * b.width)
                v = (cy - oy) / (0.5 * b.height)
                code_x = (np.abs(u) - 0.5)[:, None] * part_x + u[:, None] * side_x
                code_y = (np.abs(v) - 0.5)[:, None] * part_y + v[:, None] * side_y
                code = spec.part_scale * (code_y[:, None, :] + code_x[None, :, :])
                values = np.where(mask[..., None], values + code, values)
        if spec.noise_sigma > 0:
            rng = make_rng(spec.seed, "noise", image_id, gi)
            values = values + rng.standard_normal(values.shape) * (spec.noise_sigma / math.sqrt(spec.dim))
        grids.append(FeatureGrid(values, stride=float(stride)))
    return grids


def generate_corpus(spec: CorpusSpec) -> list[SceneRecord]:
    spec.validate()
    concepts = index_hierarchy(spec.concepts)
    leaves = leaf_ids(spec.concepts)
    if not leaves:
        raise ConfigError("no leaf concepts")
    embedder = spec.embedder()
    corpus = []
    for i in range(spec.n_images):
        image_id = image_id_for(i)
        objects = [ObjectAnnotation(box, label_path(concepts, leaf)) for leaf, box in sample_layout(spec, i, leaves)]
        grids = paint_grids(spec, embedder, image_id, objects)
        corpus.append(SceneRecord(image_id, (float(spec.extent[0]), float(spec.extent[1])), objects, grids))
    return corpus


def render_corpus(records: Sequence[SceneRecord], spec: CorpusSpec) -> list[SceneRecord]:
    """Regenerate feature grids for records loaded from an annotation file."""
    embedder = spec.embedder()
    return [SceneRecord(r.image_id, r.extent, list(r.objects), paint_grids(spec, embedder, r.image_id, r.objects)) for r in records]


def save_annotations(corpus: Sequence[SceneRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in corpus:
            row = {
                "image_id": rec.image_id,
                "width": rec.width,
                "height": rec.height,
                "objects": [{"box": o.box.as_list(), "labels": list(o.label_path)} for o in rec.objects],
            }
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def _validate_record(rec: SceneRecord, concepts: Mapping[str, ConceptNode] | None) -> None:
    for o in rec.objects:
        b = o.box
        if b.x1 < 0 or b.y1 < 0 or b.x2 > rec.width or b.y2 > rec.height:
            raise AnnotationValidationError(rec.image_id, f"box {b.as_list()} outside extent {rec.extent}")
        if concepts is None:
            continue
        for i, label in enumerate(o.label_path):
            if label not in concepts:
                raise AnnotationValidationError(rec.image_id, f"unknown label {label!r}")
            expected = o.label_path[i - 1] if i else None
            if concepts[label].parent != expected:
                raise AnnotationValidationError(rec.image_id, f"label path {list(o.label_path)} breaks parent links")


def load_annotations(path: str | Path, concepts: Sequence[ConceptNode] | None = None) -> list[SceneRecord]:
    """Read a JSON-lines annotation file.  Grids are left empty; see :func:`render_corpus`."""
    index = index_hierarchy(concepts) if concepts is not None else None
    records: list[SceneRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                image_id = str(row["image_id"])
                extent = (float(row["width"]), float(row["height"]))
                raw_objects = row["objects"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise AnnotationParseError(lineno, str(exc)) from exc
            objects = []
            for o in raw_objects:
                try:
                    coords = [float(v) for v in o["box"]]
                    labels = tuple(str(s) for s in o["labels"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise AnnotationParseError(lineno, str(exc)) from exc
                if len(coords) != 4:
                    raise AnnotationParseError(lineno, "box must have four coordinates")
                try:
                    objects.append(ObjectAnnotation(BBox.from_seq(coords), labels))
                except ValueError as exc:
                    raise AnnotationValidationError(image_id, str(exc)) from exc
            if image_id in seen:
                raise AnnotationValidationError(image_id, "duplicate image_id")
            seen.add(image_id)
            rec = SceneRecord(image_id, extent, objects)
            _validate_record(rec, index)
            records.append(rec)
    return records
