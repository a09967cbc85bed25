"""End-to-end wiring: variant construction (full model and the four
ablations), per-query answering, and training-data assembly."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import RelinkError
from .explorer import (
    KIND_LATENT,
    ExplorationContext,
    ExploreConfig,
    QueryRecord,
    explore,
)
from .generation import extract_answer_string, generate_answer
from .kg import GraphBackbone, InstantiatedOverlay
from .latent import LatentPool
from .ranker import FeatureSet, PreferenceTuple, RankerModel
from .space import ProjectionAdapter, linearize_triple

logger = logging.getLogger(__name__)

VARIANT_FULL = "full"
VARIANT_WO_BACKBONE = "wo_backbone"
VARIANT_WO_POOL = "wo_pool"
VARIANT_WO_RANKER = "wo_ranker"
VARIANT_WO_CONTRA = "wo_contra"
VARIANTS = (VARIANT_FULL, VARIANT_WO_BACKBONE, VARIANT_WO_POOL,
            VARIANT_WO_RANKER, VARIANT_WO_CONTRA)


@dataclass
class AnsweredQuery:
    query: QueryRecord
    answer: str
    raw_reply: str
    fallback_used: bool
    error: str | None = None
    evidence: object = None


class RelinkPipeline:
    """A configured variant of the system, reusable across queries."""

    def __init__(self, store, backbone: GraphBackbone, pool: LatentPool,
                 adapter: ProjectionAdapter, ranker: RankerModel, gateway,
                 templates: dict[str, str], explore_config: ExploreConfig,
                 variant: str = VARIANT_FULL):
        if variant not in VARIANTS:
            raise RelinkError(
                f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}"
            )
        self.variant = variant
        if variant == VARIANT_WO_CONTRA:
            # untrained adapters: the unaligned-space ablation
            adapter = ProjectionAdapter.identity(adapter.d_raw, adapter.tau)
        self.ctx = ExplorationContext(
            store, backbone, pool, InstantiatedOverlay(), adapter, ranker,
            gateway, templates, explore_config,
            score_mode="cosine" if variant == VARIANT_WO_RANKER else "ranker",
            use_backbone=variant != VARIANT_WO_BACKBONE,
            use_pool=variant != VARIANT_WO_POOL,
        )
        self.templates = templates
        self.gateway = gateway

    @property
    def counters(self):
        return self.ctx.counters

    def answer_query(self, record: QueryRecord | dict) -> AnsweredQuery:
        if isinstance(record, dict):
            record = QueryRecord(
                record["query_id"], record["question"],
                tuple(record.get("topic_entities", ())), record.get("answer"),
            )
        try:
            evidence = explore(record, self.ctx)
        except RelinkError as exc:
            logger.warning("exploration failed for %s: %s", record.query_id, exc)
            return AnsweredQuery(record, "", "", True, error=str(exc))
        names = self.ctx.names()
        rec = generate_answer(record, evidence, self.gateway, names, self.templates)
        if rec.error:
            return AnsweredQuery(record, "", rec.raw_reply, rec.fallback_used,
                                 error=rec.error, evidence=evidence)
        answer = extract_answer_string(rec.raw_reply, record.text, self.gateway,
                                       self.templates)
        return AnsweredQuery(record, answer, rec.raw_reply, rec.fallback_used,
                             evidence=evidence)


def mine_alignment_pairs(backbone: GraphBackbone, pool: LatentPool,
                         gateway, names: dict[str, str]):
    """Positive pairs for contrastive alignment: an explicit triple and a
    latent relation over the same entity pair whose provenance sentence is
    the relation's context sentence. Returns paired raw-vector arrays."""
    by_pair_context: dict[tuple, list] = {}
    for r in pool.relations:
        by_pair_context.setdefault(
            (frozenset((r.e_i, r.e_j)), r.context), []
        ).append(r)
    pairs = []
    for tid in sorted(backbone.triples):
        t = backbone.triples[tid]
        key = (frozenset((t.head, t.tail)), t.provenance)
        for r in by_pair_context.get(key, ()):
            pairs.append((t, r))
    if not pairs:
        return np.zeros((0, 0)), np.zeros((0, 0))
    texts = [linearize_triple(t, names) for t, _ in pairs]
    x_f = np.stack(gateway.embed(texts))
    x_l = np.stack([np.asarray(r.vector, dtype=np.float64) for _, r in pairs])
    return x_f, x_l


def make_featurizer(prefs: list[PreferenceTuple], ctx: ExplorationContext):
    """Precompute raw vectors for the mined tuples and return a closure
    that featurizes them under any adapter (the adapter changes between
    staged-training cycles; the raw vectors do not)."""
    q_raw = np.stack([ctx.raw_embed(p.query.text) for p in prefs]) \
        if prefs else np.zeros((0, 0))
    pos_raw = np.stack([ctx.edge_raw_vector(p.pos_edge) for p in prefs]) \
        if prefs else np.zeros((0, 0))
    neg_raw = np.stack([ctx.edge_raw_vector(p.neg_edge) for p in prefs]) \
        if prefs else np.zeros((0, 0))
    pos_latent = np.array([p.pos_edge.kind == KIND_LATENT for p in prefs])
    neg_latent = np.array([p.neg_edge.kind == KIND_LATENT for p in prefs])
    prev = np.array([p.prefix.avg_score for p in prefs])

    def project(adapter: ProjectionAdapter, raw: np.ndarray,
                latent_mask: np.ndarray) -> np.ndarray:
        out = np.empty_like(raw)
        for i in range(raw.shape[0]):
            if latent_mask[i]:
                out[i] = adapter.project_latent(raw[i])
            else:
                out[i] = adapter.project_factual(raw[i])
        return out

    def featurize(adapter: ProjectionAdapter) -> FeatureSet:
        if not prefs:
            return FeatureSet(q_raw, pos_raw, prev, neg_raw, prev)
        q = project(adapter, q_raw, np.zeros(len(prefs), dtype=bool))
        return FeatureSet(
            q,
            project(adapter, pos_raw, pos_latent),
            prev,
            project(adapter, neg_raw, neg_latent),
            prev.copy(),
        )

    return featurize
