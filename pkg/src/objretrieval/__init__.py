"""Cached object-embedding retrieval: proposals, probe, cache, retrieval, REC and metrics."""

from .embedstore import EmbeddingStore, ImageCacheRecord, Proposal, build_store, load_store, save_store, score_query
from .geometry import BBox, FeatureGrid, ScoredBox, iou, nms, pool_region_embedding, roi_pool
from .metrics import EvalReport, average_precision, average_recall, top1_accuracy
from .probe import ObjectnessProbe, ProbeTrainConfig, propose, soft_focal_loss, train_probe
from .recret import CandidateList, RecTask, ToyScorer, assemble_candidates, decode_rec, score_candidates, train_rec_scorer
from .retrieval import QuerySpec, RetrievalReport, evaluate_retrieval, retrieve
from .synthworld import ConceptNode, CorpusSpec, SceneRecord, generate_corpus

__version__ = "0.1.0"
