from __future__ import annotations

import collections
import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objretrieval.geometry import BBox, iou, pool_region_embedding
from objretrieval.synthworld import (
    BACKGROUND,
    AnnotationParseError,
    AnnotationValidationError,
    ConceptEmbedder,
    ConfigError,
    CorpusSpec,
    ObjectAnnotation,
    default_world,
    embed_concept,
    generate_corpus,
    index_hierarchy,
    leaf_ids,
    load_annotations,
    node,
    render_corpus,
    save_annotations,
    sample_label,
)
from objretrieval.rng import make_rng

FIVE = tuple(node(c) for c in ("ant", "bee", "cow", "doe", "elk"))


def resimulated_counts(spec: CorpusSpec) -> collections.Counter:
    """Leaf counts from an independent replay of the layout sampler's draw sequence."""
    leaves = [c.id for c in spec.concepts]
    counts: collections.Counter = collections.Counter()
    w, h = spec.extent
    for i in range(spec.n_images):
        payload = repr((spec.seed, "layout", str(i))).encode()
        key = int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")
        rng = np.random.Generator(np.random.Philox(key))
        boxes: list[tuple[int, int, int, int]] = []
        for _ in range(int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))):
            leaf = leaves[int(rng.integers(len(leaves)))]
            for _ in range(50):
                bw, bh = int(rng.choice(spec.object_sizes)), int(rng.choice(spec.object_sizes))
                if max(bw, bh) > spec.max_aspect * min(bw, bh):
                    continue
                x = 2 * int(rng.integers(0, (w - bw) // 2 + 1))
                y = 2 * int(rng.integers(0, (h - bh) // 2 + 1))
                overlap = any(min(x + bw, b[2]) > max(x, b[0]) and min(y + bh, b[3]) > max(y, b[1]) for b in boxes)
                if not overlap:
                    boxes.append((x, y, x + bw, y + bh))
                    counts[leaf] += 1
                    break
    return counts


@pytest.fixture(scope="module")
def small_corpus():
    spec = CorpusSpec(n_images=12, seed=4)
    return spec, generate_corpus(spec)


class TestHierarchy:
    def test_default_world_leaves(self):
        assert sorted(leaf_ids(default_world())) == ["bicycle", "bird", "bus", "car", "cat", "chair", "desk", "terrier"]

    def test_cycle_rejected(self):
        with pytest.raises(ConfigError):
            index_hierarchy((node("a", "b"), node("b", "a")))

    def test_depth_limit(self):
        with pytest.raises(ConfigError):
            index_hierarchy((node("a"), node("b", "a"), node("c", "b"), node("d", "c")))

    def test_unknown_parent(self):
        with pytest.raises(ConfigError):
            index_hierarchy((node("a", "zzz"),))


class TestSampleLabel:
    def test_single(self):
        ann = ObjectAnnotation(BBox(0, 0, 1, 1), ("cat",))
        rng = make_rng(0, "t")
        assert sample_label(ann, "last_two", rng) == "cat"
        assert sample_label(ann, "uniform_all", rng) == "cat"

    def test_last_two_frequency(self):
        ann = ObjectAnnotation(BBox(0, 0, 1, 1), ("animal", "dog", "a yellow dog"))
        rng = make_rng(1, "freq")
        c = collections.Counter(sample_label(ann, "last_two", rng) for _ in range(10_000))
        assert c["animal"] == 0
        assert abs(c["dog"] / 1e4 - 0.5) < 0.02
        assert abs(c["a yellow dog"] / 1e4 - 0.5) < 0.02

    def test_uniform_frequency(self):
        ann = ObjectAnnotation(BBox(0, 0, 1, 1), ("animal", "dog", "terrier"))
        rng = make_rng(2, "freq")
        c = collections.Counter(sample_label(ann, "uniform_all", rng) for _ in range(10_000))
        for label in ann.label_path:
            assert abs(c[label] / 1e4 - 1 / 3) < 0.02

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            sample_label(ObjectAnnotation(BBox(0, 0, 1, 1), ("a",)), "nope", make_rng(0))


class TestEmbedder:
    def test_unit_and_deterministic(self):
        e = ConceptEmbedder(64, 7, default_world())
        for c in e.vocabulary:
            v = e.embed(c)
            assert abs(np.linalg.norm(v) - 1) < 1e-6
            assert np.array_equal(v, ConceptEmbedder(64, 7, default_world()).embed(c))

    def test_distinct_pair(self):
        e = ConceptEmbedder(64, 7, default_world())
        assert abs(float(embed_concept(e, "cat") @ embed_concept(e, "car"))) < 0.5

    def test_base_vocabulary_orthonormal(self):
        e = ConceptEmbedder(64, 3, default_world())
        m = np.stack([e.embed(c) for c in e.vocabulary])
        assert np.allclose(m @ m.T, np.eye(len(m)), atol=1e-12)

    def test_falls_back_when_vocabulary_exceeds_dim(self):
        e = ConceptEmbedder(4, 3, default_world())
        v = e.embed("cat")
        assert abs(np.linalg.norm(v) - 1) < 1e-12

    def test_unknown(self):
        with pytest.raises(KeyError):
            ConceptEmbedder(8, 0, default_world()).embed("unicorn")

    def test_draw_noise(self):
        e = ConceptEmbedder(64, 0, default_world(), noise_sigma=0.3)
        a, b = e.draw("cat", 0), e.draw("cat", 1)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, e.draw("cat", 0))
        assert abs(np.linalg.norm(a) - 1) < 1e-12


class TestGenerate:
    def test_deterministic(self, small_corpus):
        spec, corpus = small_corpus
        again = generate_corpus(spec)
        assert corpus == again
        for a, b in zip(corpus, again):
            for ga, gb in zip(a.grids, b.grids):
                assert np.array_equal(ga.values, gb.values)

    def test_empty_concepts(self):
        with pytest.raises(ConfigError):
            generate_corpus(CorpusSpec(n_images=1, concepts=()))

    def test_layout_constraints(self, small_corpus):
        spec, corpus = small_corpus
        for rec in corpus:
            lo, hi = spec.objects_per_image
            assert len(rec.objects) <= hi
            for i, o in enumerate(rec.objects):
                b = o.box
                assert 0 <= b.x1 and b.x2 <= 24 and 0 <= b.y1 and b.y2 <= 24
                assert max(b.width, b.height) <= 1.5 * min(b.width, b.height)
                for other in rec.objects[i + 1 :]:
                    assert iou(b, other.box) == 0.0

    def test_noiseless_pooling_exact(self, small_corpus):
        spec, corpus = small_corpus
        e = spec.embedder()
        for rec in corpus:
            for o in rec.objects:
                assert np.allclose(pool_region_embedding(rec.grids, o.box), e.embed(o.leaf), atol=1e-12)

    def test_background(self, small_corpus):
        spec, corpus = small_corpus
        bg = spec.embedder().embed(BACKGROUND)
        rec = next(r for r in corpus if r.objects)
        covered = np.zeros((24, 24), dtype=bool)
        for o in rec.objects:
            b = o.box
            covered[int(b.y1) : int(b.y2), int(b.x1) : int(b.x2)] = True
        assert np.allclose(rec.grids[0].values[~covered], bg)

    def test_inner_boxes_differ_from_tight(self, small_corpus):
        spec, corpus = small_corpus
        e = spec.embedder()
        rec = next(r for r in corpus if any(o.box.width == 8 for o in r.objects))
        o = next(o for o in rec.objects if o.box.width == 8)
        b = o.box
        for inner in (BBox(b.x1, b.y1, b.x1 + 4, b.y1 + 4), BBox(b.x1 + 1, b.y1 + 1, b.x2 - 1, b.y2 - 1)):
            v = pool_region_embedding(rec.grids, inner)
            assert float(v @ e.embed(o.leaf)) / np.linalg.norm(v) < 0.99

    def test_argmax_recovers_leaf(self, small_corpus):
        spec, corpus = small_corpus
        e = spec.embedder()
        leaves = leaf_ids(spec.concepts)
        table = np.stack([e.embed(c) for c in leaves])
        for rec in corpus:
            for o in rec.objects:
                assert leaves[int(np.argmax(table @ pool_region_embedding(rec.grids, o.box)))] == o.leaf

    def test_resimulated_counts(self):
        spec = CorpusSpec(n_images=100, concepts=FIVE, seed=7)
        got = collections.Counter(o.leaf for r in generate_corpus(spec) for o in r.objects)
        assert got == resimulated_counts(spec)

    def test_noise_norm(self):
        spec = CorpusSpec(n_images=1, seed=2, noise_sigma=0.3, objects_per_image=(0, 0))
        rec = generate_corpus(spec)[0]
        bg = spec.embedder().embed(BACKGROUND)
        norms = np.linalg.norm(rec.grids[0].values - bg, axis=-1)
        assert abs(norms.mean() - 0.3) < 0.02

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_any_seed_valid(self, seed):
        for rec in generate_corpus(CorpusSpec(n_images=2, seed=seed, dim=8)):
            for o in rec.objects:
                assert o.label_path[-1] == o.leaf


class TestAnnotations:
    def test_round_trip(self, small_corpus, tmp_path):
        spec, corpus = small_corpus
        p = tmp_path / "a.jsonl"
        save_annotations(corpus[:3], p)
        loaded = load_annotations(p, spec.concepts)
        assert loaded == corpus[:3]
        rendered = render_corpus(loaded, spec)
        assert np.array_equal(rendered[0].grids[0].values, corpus[0].grids[0].values)

    def test_inverted_box(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text(json.dumps({"image_id": "x", "width": 10, "height": 10, "objects": [{"box": [5, 0, 1, 2], "labels": ["cat"]}]}) + "\n")
        with pytest.raises(AnnotationValidationError):
            load_annotations(p)

    def test_truncated_line(self, small_corpus, tmp_path):
        _, corpus = small_corpus
        p = tmp_path / "a.jsonl"
        save_annotations(corpus[:3], p)
        text = p.read_text()
        p.write_text(text[: len(text) - 10])
        with pytest.raises(AnnotationParseError) as err:
            load_annotations(p)
        assert err.value.line == 3

    def test_bad_label_path(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text(json.dumps({"image_id": "x", "width": 10, "height": 10, "objects": [{"box": [0, 0, 1, 1], "labels": ["vehicle", "cat"]}]}) + "\n")
        with pytest.raises(AnnotationValidationError):
            load_annotations(p, default_world())

    def test_spec_round_trip(self):
        spec = CorpusSpec(n_images=3, seed=9, extra_terms=("left",))
        assert CorpusSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
