from __future__ import annotations

import pytest

from objretrieval.embedstore import build_store
from objretrieval.probe import ProbeTrainConfig, oracle_probe, probe_training_set, train_probe
from objretrieval.synthworld import CorpusSpec, generate_corpus, leaf_ids


@pytest.fixture(scope="session")
def world():
    """A small noiseless corpus with an oracle probe, a trained probe and a cache."""
    spec = CorpusSpec(n_images=30, seed=21)
    corpus = generate_corpus(spec)
    emb = spec.embedder()
    oracle = oracle_probe(emb, leaf_ids(spec.concepts))
    x, y = probe_training_set(corpus[:10])
    trained, losses = train_probe(x, y, ProbeTrainConfig(epochs=150))
    store = build_store(corpus, trained, k=50)
    return {
        "spec": spec,
        "corpus": corpus,
        "embedder": emb,
        "oracle": oracle,
        "probe": trained,
        "losses": losses,
        "store": store,
    }
