"""Cached inner-product retrieval versus per-query re-extraction.

The cached path scores a query against stored embeddings only.  The
baseline recomputes every proposal embedding from the feature grids before
scoring, as a fused model that cannot cache its visual side would have to.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .embedstore import EmbeddingStore, score_all, tile_store
from .geometry import grid_reads, normalize_rows, pool_region_embeddings
from .rng import make_rng

BENCH_SIZES: tuple[int, ...] = (1_000, 10_000, 100_000)


@dataclass
class BenchRow:
    n_proposals: int
    cached_s: float
    reextract_s: float | None
    cached_grid_reads: int

    @property
    def ratio(self) -> float | None:
        if self.reextract_s is None or self.cached_s <= 0:
            return None
        return self.reextract_s / self.cached_s


@dataclass
class BenchReport:
    n_queries: int
    rows: list[BenchRow] = field(default_factory=list)
    slope: float | None = None
    intercept: float | None = None
    r2: float | None = None

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "rows": [
                {
                    "n_proposals": r.n_proposals,
                    "cached_s_per_query": r.cached_s,
                    "reextract_s_per_query": r.reextract_s,
                    "ratio": r.ratio,
                    "cached_grid_reads": r.cached_grid_reads,
                }
                for r in self.rows
            ],
            "linear_fit": {"slope": self.slope, "intercept": self.intercept, "r2": self.r2},
        }


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares ``y = a + b x``; returns ``(b, a, r2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b, a = np.polyfit(x, y, 1)
    resid = y - (a + b * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(b), float(a), r2


def _min_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def reextract_scores(store: EmbeddingStore, sources: Sequence[str], corpus: Mapping, query: np.ndarray) -> np.ndarray:
    """Score ``query`` after re-pooling every stored box from its scene grids."""
    parts = []
    for i, src in enumerate(sources):
        lo, hi = store.offsets[i], store.offsets[i + 1]
        if hi == lo:
            continue
        emb = normalize_rows(pool_region_embeddings(corpus[src].grids, store.boxes[lo:hi].astype(np.float64)))
        parts.append(emb @ query)
    return np.concatenate(parts) if parts else np.zeros(0)


def run_bench(
    store: EmbeddingStore,
    corpus: Mapping,
    n_queries: int,
    sizes: Sequence[int] = BENCH_SIZES,
    seed: int = 0,
    repeats: int = 5,
    baseline_queries: int = 1,
) -> BenchReport:
    """Per-query wall time of both paths at each total proposal count in ``sizes``.

    The cached path is timed over ``n_queries`` random unit queries (best of
    ``repeats``); the slower baseline over ``min(n_queries, baseline_queries)``.
    """
    report = BenchReport(n_queries)
    if n_queries <= 0:
        return report
    rng = make_rng(seed, "bench-queries")
    queries = normalize_rows(rng.standard_normal((n_queries, store.dim)))
    for n in sizes:
        tiled, sources = tile_store(store, n)
        tiled.embeddings64  # materialise outside the timed region
        reads0 = grid_reads.count

        def cached() -> None:
            for q in queries:
                score_all(tiled, q)

        cached_s = _min_time(cached, repeats) / n_queries
        reads = grid_reads.count - reads0
        nb = min(n_queries, baseline_queries)
        t0 = time.perf_counter()
        for q in queries[:nb]:
            reextract_scores(tiled, sources, corpus, q)
        reextract_s = (time.perf_counter() - t0) / nb
        report.rows.append(BenchRow(tiled.n_proposals, cached_s, reextract_s, reads))
    if len(report.rows) >= 2:
        report.slope, report.intercept, report.r2 = linear_fit(
            [r.n_proposals for r in report.rows], [r.cached_s for r in report.rows]
        )
    return report
