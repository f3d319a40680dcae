"""Persistent per-image proposal cache with exhaustive inner-product scoring.

All proposals live in three flat arrays (boxes, objectness, embeddings)
indexed by per-record offsets.  The store holds no reference to scene data,
so answering a query never touches feature grids.

File layout (little-endian, no padding)::

    b"WDUC"  u32 version=1  u32 dim  u64 n_records
    per record:   u16 id_len, id bytes (UTF-8), u32 n_proposals
    per proposal: 4 x f32 box, f32 objectness, dim x f32 embedding
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .geometry import BBox, normalize_rows
from .probe import DEFAULT_SCALES, ObjectnessProbe, propose_arrays

MAGIC = b"WDUC"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class CacheFormatError(ValueError):
    """Structured cache-file error; ``reason`` is one of magic, version, truncated, invalid."""

    def __init__(self, reason: str, message: str):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


def _proposal_dtype(dim: int) -> np.dtype:
    return np.dtype([("box", "<f4", (4,)), ("objectness", "<f4"), ("embedding", "<f4", (dim,))])


@dataclass(frozen=True)
class Proposal:
    box: BBox
    objectness: float
    embedding: np.ndarray


@dataclass(frozen=True)
class ImageCacheRecord:
    image_id: str
    boxes: np.ndarray
    objectness: np.ndarray
    embeddings: np.ndarray

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def proposals(self) -> list[Proposal]:
        return [
            Proposal(BBox.from_seq(b), float(o), e)
            for b, o, e in zip(self.boxes.astype(np.float64), self.objectness, self.embeddings)
        ]


class EmbeddingStore:
    """Immutable collection of cached proposal records."""

    def __init__(
        self,
        dim: int,
        image_ids: Sequence[str],
        offsets: np.ndarray,
        boxes: np.ndarray,
        objectness: np.ndarray,
        embeddings: np.ndarray,
    ):
        self.dim = int(dim)
        self.image_ids = list(image_ids)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.boxes = np.ascontiguousarray(boxes, dtype=np.float32).reshape(-1, 4)
        self.objectness = np.ascontiguousarray(objectness, dtype=np.float32).reshape(-1)
        self.embeddings = np.ascontiguousarray(embeddings, dtype=np.float32).reshape(-1, self.dim)
        self.index = {iid: i for i, iid in enumerate(self.image_ids)}
        self._emb64: np.ndarray | None = None
        self._validate()
        for arr in (self.offsets, self.boxes, self.objectness, self.embeddings):
            arr.setflags(write=False)

    def _validate(self) -> None:
        if len(self.index) != len(self.image_ids):
            raise ValueError("duplicate image ids in store")
        n = self.boxes.shape[0]
        if self.offsets.shape != (len(self.image_ids) + 1,) or self.offsets[0] != 0 or self.offsets[-1] != n:
            raise ValueError("record offsets do not cover the proposal arrays")
        if np.any(np.diff(self.offsets) < 0):
            raise ValueError("record offsets must be non-decreasing")
        if self.objectness.shape[0] != n or self.embeddings.shape[0] != n:
            raise ValueError("proposal arrays differ in length")
        for i in range(len(self.image_ids)):
            obj = self.objectness[self.offsets[i] : self.offsets[i + 1]]
            if np.any(np.diff(obj) > 0):
                raise ValueError(f"record {self.image_ids[i]!r} is not sorted by descending objectness")

    @property
    def embeddings64(self) -> np.ndarray:
        """Float64 view of the embeddings, materialised once for accumulation."""
        if self._emb64 is None:
            self._emb64 = self.embeddings.astype(np.float64)
            self._emb64.setflags(write=False)
        return self._emb64

    @property
    def n_proposals(self) -> int:
        return self.boxes.shape[0]

    def __len__(self) -> int:
        return len(self.image_ids)

    def record(self, image_id: str) -> ImageCacheRecord:
        i = self.index[image_id]
        return self._record_at(i)

    def _record_at(self, i: int) -> ImageCacheRecord:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return ImageCacheRecord(self.image_ids[i], self.boxes[lo:hi], self.objectness[lo:hi], self.embeddings[lo:hi])

    def records(self) -> Iterator[ImageCacheRecord]:
        for i in range(len(self.image_ids)):
            yield self._record_at(i)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    @classmethod
    def from_records(cls, dim: int, records: Sequence[ImageCacheRecord]) -> "EmbeddingStore":
        counts = [len(r) for r in records]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

        def cat(parts, shape):
            return np.concatenate(parts) if parts else np.zeros(shape, dtype=np.float32)

        return cls(
            dim,
            [r.image_id for r in records],
            offsets,
            cat([r.boxes for r in records], (0, 4)),
            cat([r.objectness for r in records], (0,)),
            cat([r.embeddings for r in records], (0, dim)),
        )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_HEADER.pack(MAGIC, VERSION, self.dim, len(self.image_ids)))
        dt = _proposal_dtype(self.dim)
        for i, iid in enumerate(self.image_ids):
            raw = iid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"image id too long: {iid[:32]}...")
            lo, hi = self.offsets[i], self.offsets[i + 1]
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", hi - lo))
            rows = np.empty(hi - lo, dtype=dt)
            rows["box"] = self.boxes[lo:hi]
            rows["objectness"] = self.objectness[lo:hi]
            rows["embedding"] = self.embeddings[lo:hi]
            buf.write(rows.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingStore":
        if len(data) < _HEADER.size:
            raise CacheFormatError("truncated", "file shorter than header")
        magic, version, dim, n_records = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise CacheFormatError("magic", f"expected {MAGIC!r}, found {magic!r}")
        if version != VERSION:
            raise CacheFormatError("version", f"unsupported version {version}")
        if dim < 1:
            raise CacheFormatError("invalid", "dim must be positive")
        dt = _proposal_dtype(dim)
        pos = _HEADER.size
        ids, counts, chunks = [], [], []
        for r in range(n_records):
            if pos + 2 > len(data):
                raise CacheFormatError("truncated", f"header declares {n_records} records, found {r}")
            (id_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + id_len + 4 > len(data):
                raise CacheFormatError("truncated", f"record {r} header cut short")
            try:
                ids.append(data[pos : pos + id_len].decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise CacheFormatError("invalid", f"record {r} id is not UTF-8") from exc
            pos += id_len
            (count,) = struct.unpack_from("<I", data, pos)
            pos += 4
            end = pos + count * dt.itemsize
            if end > len(data):
                raise CacheFormatError("truncated", f"record {r} declares {count} proposals past end of file")
            chunks.append(np.frombuffer(data, dtype=dt, count=count, offset=pos))
            counts.append(count)
            pos = end
        if pos != len(data):
            raise CacheFormatError("invalid", f"{len(data) - pos} trailing bytes after {n_records} records")
        rows = np.concatenate(chunks) if chunks else np.empty(0, dtype=dt)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        try:
            return cls(dim, ids, offsets, rows["box"], rows["objectness"], rows["embedding"])
        except ValueError as exc:
            raise CacheFormatError("invalid", str(exc)) from exc


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    Path(path).write_bytes(store.to_bytes())


def load_store(path: str | Path) -> EmbeddingStore:
    return EmbeddingStore.from_bytes(Path(path).read_bytes())


def build_store(
    corpus: Sequence,
    probe: ObjectnessProbe,
    k: int = 100,
    nms_iou: float = 0.5,
    stride: float = 1,
    scales: Sequence[float] = DEFAULT_SCALES,
) -> EmbeddingStore:
    """Propose, suppress and keep the top-``k`` proposals of every scene."""
    if k < 1:
        raise ValueError("k must be at least 1")
    records = []
    for rec in corpus:
        if rec.grids and rec.grids[0].dim != probe.dim:
            raise ValueError(f"probe dim {probe.dim} != corpus feature dim {rec.grids[0].dim}")
        boxes, scores, emb = propose_arrays(rec.grids, probe, stride, scales, nms_iou, k)
        records.append(
            ImageCacheRecord(
                rec.image_id,
                boxes.astype(np.float32),
                # NMS output is descending in float64; rounding to float32 cannot reorder it
                scores.astype(np.float32),
                normalize_rows(emb).astype(np.float32),
            )
        )
    return EmbeddingStore.from_records(probe.dim, records)


def score_query(store: EmbeddingStore, query: np.ndarray) -> list[tuple[str, np.ndarray]]:
    """Dot product of ``query`` with every cached embedding, grouped per image (float64 accumulation)."""
    flat = score_all(store, query)
    return [(iid, flat[store.offsets[i] : store.offsets[i + 1]]) for i, iid in enumerate(store.image_ids)]


def score_all(store: EmbeddingStore, query: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != store.dim:
        raise ValueError(f"query dim {q.shape[0]} != store dim {store.dim}")
    return store.embeddings64 @ q


def tile_store(store: EmbeddingStore, n_total: int) -> tuple[EmbeddingStore, list[str]]:
    """Repeat records (renamed ``<id>#<copy>``) until at least ``n_total`` proposals are stored.

    Also returns, for each tiled record, the id of the record it copies.
    """
    if store.n_proposals == 0:
        raise ValueError("cannot tile an empty store")
    src, recs = [], []
    copy = 0
    total = 0
    while total < n_total:
        for r in store.records():
            if total >= n_total:
                break
            name = r.image_id if copy == 0 else f"{r.image_id}#{copy}"
            recs.append(ImageCacheRecord(name, r.boxes, r.objectness, r.embeddings))
            src.append(r.image_id)
            total += len(r)
        copy += 1
    return EmbeddingStore.from_records(store.dim, recs), src
