"""Command-line surface: ``python -m objretrieval <command> ...``.

Every command writes its artifact plus a run manifest
``{command, config, seed, wall_time}`` to ``<artifact>.manifest.json``.
Reports go to ``--report`` when given, otherwise to stdout.

Exit codes: 0 success, 2 usage, 3 missing input, 4 invalid configuration,
5 training divergence, 6 malformed input file, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bench import BENCH_SIZES, run_bench
from .embedstore import CacheFormatError, build_store, load_store, save_store
from .geometry import BBox, ScoredBox
from .metrics import EvalReport, GroundTruth, average_precision, average_recall, coco_ap
from .probe import DivergenceError, ObjectnessProbe, ProbeTrainConfig, probe_training_set, train_probe
from .recret import (
    RecTrainConfig,
    ToyScorer,
    evaluate_rec,
    generate_rec_corpus,
    hard_negative_tasks,
    load_tasks,
    rec_corpus_spec,
    save_tasks,
    train_rec_scorer,
)
from .retrieval import DEFAULT_THRESHOLD, QuerySpec, detect, evaluate_retrieval, retrieval_ground_truth, retrieve
from .synthworld import (
    AnnotationParseError,
    AnnotationValidationError,
    ConfigError,
    CorpusSpec,
    generate_corpus,
    leaf_ids,
    load_annotations,
    render_corpus,
    save_annotations,
)

EXIT_OK = 0
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_DIVERGED = 5
EXIT_FORMAT = 6


class MissingInputError(FileNotFoundError):
    pass


@dataclasses.dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int
    options: dict

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
        return cls(args.command, args.seed, opts)


# --- artifact helpers ---------------------------------------------------------------------


def meta_path(corpus: str | Path) -> Path:
    return Path(f"{corpus}.meta.json")


def default_tasks_path(corpus: str | Path) -> Path:
    return Path(f"{corpus}.tasks.jsonl")


def _require(path: str | Path | None, flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{flag} {p} does not exist")
    return p


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def load_corpus(path: str | Path | None) -> tuple[CorpusSpec, list]:
    """Annotations plus the generator spec from the sidecar; grids are re-rendered."""
    p = _require(path, "--corpus")
    mp = meta_path(p)
    if not mp.exists():
        raise MissingInputError(f"corpus metadata {mp} does not exist")
    try:
        spec = CorpusSpec.from_dict(json.loads(mp.read_text(encoding="utf-8"))["spec"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise AnnotationParseError(0, f"corpus metadata: {exc}") from exc
    records = load_annotations(p, spec.concepts)
    return spec, render_corpus(records, spec)


def _emit(text: str, report: str | None) -> Path | None:
    if report is None:
        sys.stdout.write(text)
        return None
    Path(report).write_text(text, encoding="utf-8")
    return Path(report)


def _write_manifest(target: Path | None, cfg: RunConfig, wall: float) -> None:
    manifest = {"command": cfg.command, "config": cfg.options, "seed": cfg.seed, "wall_time": wall}
    text = _dump(manifest)
    if target is None:
        sys.stderr.write(text)
    else:
        Path(f"{target}.manifest.json").write_text(text, encoding="utf-8")


# --- commands -----------------------------------------------------------------------------


def cmd_gen(args) -> Path:
    if args.corpus is None:
        raise ConfigError("--corpus is required")
    if args.rec:
        spec = rec_corpus_spec(args.images, args.seed, args.dim, args.noise)
        scenes, tasks = generate_rec_corpus(spec, args.policy, args.start)
        save_tasks(tasks, args.queries or default_tasks_path(args.corpus))
    else:
        spec = CorpusSpec(n_images=args.images, dim=args.dim, seed=args.seed, noise_sigma=args.noise)
        scenes = generate_corpus(spec)
    save_annotations(scenes, args.corpus)
    meta_path(args.corpus).write_text(_dump({"spec": spec.to_dict(), "rec": args.rec, "start": args.start}), encoding="utf-8")
    return Path(args.corpus)


def cmd_train_probe(args) -> Path:
    _, corpus = load_corpus(args.corpus)
    if args.probe is None:
        raise ConfigError("--probe is required")
    x, y = probe_training_set(corpus[: args.train_images])
    cfg = ProbeTrainConfig(epochs=args.epochs, seed=args.seed)
    probe, _ = train_probe(x, y, cfg)
    probe.save(args.probe)
    return Path(args.probe)


def cmd_build_cache(args) -> Path:
    _, corpus = load_corpus(args.corpus)
    probe = ObjectnessProbe.load(_require(args.probe, "--probe"))
    if args.cache is None:
        raise ConfigError("--cache is required")
    save_store(build_store(corpus, probe, k=args.k), args.cache)
    return Path(args.cache)


def _load_cache(path):
    return load_store(_require(path, "--cache"))


def _query_list(raw: str | None) -> list[str]:
    """Comma-separated queries, or a file with one query per line.  Terms within a query are space-separated."""
    if raw is None:
        raise ConfigError("--queries is required")
    p = Path(raw)
    lines = p.read_text(encoding="utf-8").splitlines() if p.is_file() else raw.split(",")
    out = [q.strip() for q in lines if q.strip()]
    if not out:
        raise ConfigError("no queries given")
    return out


def cmd_query(args) -> Path | None:
    spec, _ = load_corpus(args.corpus)
    store = _load_cache(args.cache)
    emb = spec.embedder()
    results = {}
    for text in _query_list(args.queries):
        try:
            vec = emb.compose(text.split())
        except KeyError as exc:
            raise ConfigError(f"unknown query term in {text!r}: {exc}") from exc
        res = retrieve(store, QuerySpec(text, vec, args.threshold))
        results[text] = {"images": sorted(res.images), "max_score": res.per_image_max}
    return _emit(_dump({"threshold": args.threshold, "results": results}), args.report)


def cmd_eval_detect(args) -> Path | None:
    spec, corpus = load_corpus(args.corpus)
    store = _load_cache(args.cache)
    emb = spec.embedder()
    classes = {c: emb.embed(c) for c in leaf_ids(spec.concepts)}
    dets = detect(store, classes, min_similarity=args.threshold)
    gts = [GroundTruth(r.image_id, o.leaf, o.box) for r in corpus for o in r.objects]
    ap = average_precision(dets, gts)
    report = EvalReport(ap=ap.per_class, ap_mean=ap.mean, counts={"tp": ap.tp, "fp": ap.fp, "fn": ap.fn})
    d = report.to_dict()
    d["ap"]["coco"] = coco_ap(dets, gts)
    return _emit(_dump(d), args.report)


def cmd_eval_recall(args) -> Path | None:
    _, corpus = load_corpus(args.corpus)
    store = _load_cache(args.cache)
    props = {}
    for rec in store.records():
        props[rec.image_id] = [ScoredBox(BBox.from_seq(b), float(s)) for b, s in zip(rec.boxes.astype(np.float64), rec.objectness)]
    gts = {r.image_id: [o.box for o in r.objects] for r in corpus}
    ks = sorted({args.k, 100, 300}) if args.k else [100, 300]
    report = EvalReport(ar={k: average_recall(props, gts, k) for k in ks}, counts={"gt": sum(len(v) for v in gts.values())})
    return _emit(_dump(report.to_dict()), args.report)


def cmd_eval_retrieval(args) -> Path | None:
    spec, corpus = load_corpus(args.corpus)
    store = _load_cache(args.cache)
    emb = spec.embedder()
    concepts = leaf_ids(spec.concepts)
    results = {c: retrieve(store, QuerySpec(c, emb.embed(c), args.threshold)) for c in concepts}
    report = evaluate_retrieval(results, retrieval_ground_truth(corpus, concepts), federated=args.federated)
    return _emit(report.to_json() + "\n", args.report)


def _tasks(args) -> list:
    path = Path(args.queries) if args.queries else default_tasks_path(_require(args.corpus, "--corpus"))
    return load_tasks(_require(path, "--queries"))


def cmd_train_rec(args) -> Path:
    spec, corpus = load_corpus(args.corpus)
    store = _load_cache(args.cache)
    if args.scorer is None:
        raise ConfigError("--scorer is required")
    tasks = _tasks(args)[: args.tasks]
    used = {t.image_id for t in tasks}
    cmap = {r.image_id: r for r in corpus}
    negatives = hard_negative_tasks([r for r in corpus if r.image_id in used], store, spec.embedder())
    cfg = RecTrainConfig(epochs=args.epochs, seed=args.seed)
    scorer, _ = train_rec_scorer(cmap, store, tasks + negatives, spec.embedder(), cfg)
    scorer.save(args.scorer, cfg)
    return Path(args.scorer)


def cmd_eval_rec(args) -> Path | None:
    spec, corpus = load_corpus(args.corpus)
    store = _load_cache(args.cache)
    scorer = ToyScorer.load(_require(args.scorer, "--scorer"))
    emb = spec.embedder()
    tasks = _tasks(args)
    negatives = hard_negative_tasks(corpus, store, emb)
    ev = evaluate_rec(scorer, {r.image_id: r for r in corpus}, store, tasks + negatives, emb)
    return _emit(_dump(ev.to_dict()), args.report)


def cmd_bench(args) -> Path | None:
    _, corpus = load_corpus(args.corpus)
    store = _load_cache(args.cache)
    report = run_bench(store, {r.image_id: r for r in corpus}, args.n_queries, BENCH_SIZES, seed=args.seed)
    return _emit(_dump(report.to_dict()), args.report)


# --- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objretrieval", description="Cached object-embedding retrieval toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn: Callable, help: str, *flags: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=0)
        for flag in flags:
            FLAGS[flag](p)
        return p

    FLAGS: dict[str, Callable[[argparse.ArgumentParser], object]] = {
        "corpus": lambda p: p.add_argument("--corpus", help="annotation JSON lines; spec sidecar at <corpus>.meta.json"),
        "cache": lambda p: p.add_argument("--cache", help="binary proposal cache"),
        "probe": lambda p: p.add_argument("--probe", help="objectness probe JSON"),
        "scorer": lambda p: p.add_argument("--scorer", help="REC scorer JSON"),
        "report": lambda p: p.add_argument("--report", help="report path (default: stdout)"),
        "k": lambda p: p.add_argument("--k", type=int, default=100, help="proposals per image"),
        "threshold": lambda p: p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD),
        "queries": lambda p: p.add_argument("--queries", help="queries or task file"),
    }

    g = add("gen", cmd_gen, "generate a synthetic corpus", "corpus", "queries")
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--images", type=int, default=200)
    g.add_argument("--noise", type=float, default=0.0, help="per-cell noise norm")
    g.add_argument("--rec", action="store_true", help="referring-expression scenes and tasks")
    g.add_argument("--policy", choices=("uniform_all", "last_two"), default="last_two")
    g.add_argument("--start", type=int, default=0, help="first image index (disjoint held-out sets)")

    p = add("train-probe", cmd_train_probe, "train the objectness probe", "corpus", "probe")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--train-images", type=int, default=50)

    add("build-cache", cmd_build_cache, "propose and cache embeddings", "corpus", "probe", "cache", "k")
    add("query", cmd_query, "retrieve images for queries", "corpus", "cache", "queries", "threshold", "report")
    add("eval-detect", cmd_eval_detect, "AP of cache-based detection", "corpus", "cache", "threshold", "report")
    add("eval-recall", cmd_eval_recall, "AR@k of cached proposals", "corpus", "cache", "k", "report")
    r = add("eval-retrieval", cmd_eval_retrieval, "object-retrieval P/R/F1", "corpus", "cache", "threshold", "report")
    r.add_argument("--federated", action="store_true", help="report recall only")

    t = add("train-rec", cmd_train_rec, "train the REC scorer", "corpus", "cache", "scorer", "queries")
    t.add_argument("--epochs", type=int, default=RecTrainConfig.epochs)
    t.add_argument("--tasks", type=int, default=500, help="number of training tasks")
    add("eval-rec", cmd_eval_rec, "REC top-1 on held-out tasks", "corpus", "cache", "scorer", "queries", "report")

    b = add("bench", cmd_bench, "cached vs re-extraction timing", "corpus", "cache", "report")
    b.add_argument("--n-queries", type=int, default=20)
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig.from_args(args)
    t0 = time.perf_counter()
    try:
        target = args.func(args)
    except (MissingInputError, FileNotFoundError) as exc:
        return _fail(EXIT_MISSING, "missing_input", exc)
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGED, "divergence", exc)
    except (CacheFormatError, AnnotationParseError, AnnotationValidationError) as exc:
        return _fail(EXIT_FORMAT, "format", exc)
    except (ConfigError, ValueError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    _write_manifest(target, cfg, time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
