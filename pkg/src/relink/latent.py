"""High-recall latent relation pool: PMI-filtered entity co-occurrences,
each encoded from its context sentence with the [MASK]-token scheme."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import CorpusStore
from .errors import GatewayError, UnknownEntityError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class PoolConfig:
    tau_c: float = 0.0            # PMI threshold for pool membership
    alpha: float = 0.5            # add-alpha smoothing on pair counts
    max_contexts_per_pair: int = 3
    clamp_at_zero: bool = False   # store max(pmi, 0) instead of raw PMI


@dataclass
class CooccurrenceStats:
    """Sentence-scoped co-occurrence counts.

    One unit = one sentence; a pair counts once per sentence regardless of
    mention multiplicity. Pair keys hold the lexicographically smaller
    entity id first.
    """

    pair_counts: dict[tuple[str, str], int] = field(default_factory=dict)
    entity_counts: dict[str, int] = field(default_factory=dict)
    total_units: int = 0


def _pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def count_cooccurrences(store: CorpusStore) -> CooccurrenceStats:
    stats = CooccurrenceStats()
    for sent in store.iter_sentences():
        stats.total_units += 1
        entities = sorted(sent.entity_ids())
        for e in entities:
            stats.entity_counts[e] = stats.entity_counts.get(e, 0) + 1
        for i, a in enumerate(entities):
            for b in entities[i + 1:]:
                key = _pair_key(a, b)
                stats.pair_counts[key] = stats.pair_counts.get(key, 0) + 1
    return stats


def pmi(stats: CooccurrenceStats, e_i: str, e_j: str, alpha: float = 0.0) -> float:
    """log( p(e_i,e_j) / (p(e_i) p(e_j)) ) with add-alpha smoothing on the
    pair count; natural log. Zero smoothed joint probability gives -inf."""
    c_i = stats.entity_counts.get(e_i, 0)
    c_j = stats.entity_counts.get(e_j, 0)
    if c_i == 0 or c_j == 0:
        raise UnknownEntityError(f"no occurrences for {e_i!r} or {e_j!r}")
    total = stats.total_units
    c_ij = stats.pair_counts.get(_pair_key(e_i, e_j), 0) + alpha
    if c_ij == 0:
        return float("-inf")
    return math.log((c_ij / total) / ((c_i / total) * (c_j / total)))


@dataclass(frozen=True)
class LatentRelation:
    latent_id: str
    e_i: str
    e_j: str
    context: str          # sentence_id of the context sentence
    pmi: float
    vector: np.ndarray    # [MASK]-position encoding of the rendered pair text

    @staticmethod
    def make_id(e_i: str, e_j: str, context: str) -> str:
        digest = hashlib.sha1(f"{e_i}\x1f{e_j}\x1f{context}".encode()).hexdigest()
        return f"l_{digest[:12]}"


def render_pair_text(context_text: str, name_i: str, name_j: str) -> str:
    return f"[CLS] {context_text} [SEP] {name_i} [MASK] {name_j} [SEP]"


class LatentPool:
    def __init__(self, relations: list[LatentRelation], dim: int):
        self.relations = sorted(relations, key=lambda r: r.latent_id)
        self.dim = dim
        self._by_entity: dict[str, list[LatentRelation]] = {}
        self._by_id: dict[str, LatentRelation] = {}
        for r in self.relations:
            self._by_id[r.latent_id] = r
            self._by_entity.setdefault(r.e_i, []).append(r)
            self._by_entity.setdefault(r.e_j, []).append(r)
        for rels in self._by_entity.values():
            rels.sort(key=lambda r: (-r.pmi, r.latent_id))

    def __len__(self):
        return len(self.relations)

    def get(self, latent_id: str) -> LatentRelation:
        return self._by_id[latent_id]

    def neighbors_latent(self, entity_id: str) -> list[LatentRelation]:
        return list(self._by_entity.get(entity_id, []))

    def save(self, meta_path, vec_path) -> None:
        meta = {
            "schema_version": SCHEMA_VERSION,
            "dim": self.dim,
            "rows": len(self.relations),
            "relations": [
                {
                    "latent_id": r.latent_id,
                    "e_i": r.e_i,
                    "e_j": r.e_j,
                    "context": r.context,
                    "pmi": r.pmi,
                }
                for r in self.relations
            ],
        }
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, ensure_ascii=False, sort_keys=True, indent=1)
            fh.write("\n")
        mat = np.zeros((len(self.relations), self.dim), dtype="<f4")
        for i, r in enumerate(self.relations):
            mat[i] = r.vector
        with open(vec_path, "wb") as fh:
            fh.write(mat.tobytes())

    @classmethod
    def load(cls, meta_path, vec_path) -> "LatentPool":
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        dim = meta["dim"]
        rows = meta["rows"]
        raw = np.fromfile(vec_path, dtype="<f4")
        if raw.size != rows * dim:
            raise ValueError(
                f"vector file holds {raw.size} floats, expected {rows}x{dim}"
            )
        mat = raw.reshape(rows, dim).astype(np.float64)
        relations = [
            LatentRelation(
                m["latent_id"], m["e_i"], m["e_j"], m["context"], m["pmi"], mat[i]
            )
            for i, m in enumerate(meta["relations"])
        ]
        return cls(relations, dim)


def build_pool(store: CorpusStore, stats: CooccurrenceStats, gateway,
               config: PoolConfig, names: dict[str, str]) -> LatentPool:
    """Assemble the latent pool: PMI-filter co-occurring pairs, pick up to
    max_contexts_per_pair context sentences per pair (shortest first, ties
    by sentence_id), and encode each (pair, context) with the latent encoder.

    Overlap with explicit backbone edges is resolved at query time, not here.
    """
    contexts_by_sid: dict[str, object] = {}
    sentences_by_entity: dict[str, list] = {}
    for sent in store.iter_sentences():
        contexts_by_sid[sent.sentence_id] = sent
        for e in sent.entity_ids():
            sentences_by_entity.setdefault(e, []).append(sent)

    pending: list[tuple[str, str, str, float, str]] = []  # e_i, e_j, sid, pmi, text
    for (a, b) in sorted(stats.pair_counts):
        score = pmi(stats, a, b, alpha=config.alpha)
        if config.clamp_at_zero:
            score = max(score, 0.0)
        if not score > config.tau_c:
            continue
        shared = [
            s for s in sentences_by_entity.get(a, ())
            if b in s.entity_ids()
        ]
        shared.sort(key=lambda s: (len(s.text), s.sentence_id))
        for sent in shared[: config.max_contexts_per_pair]:
            pending.append((a, b, sent.sentence_id, score, sent.text))

    relations: list[LatentRelation] = []
    if pending:
        texts = [
            render_pair_text(text, names[a], names[b])
            for (a, b, _sid, _p, text) in pending
        ]
        try:
            vectors = gateway.embed(texts, mask_position_mode=True)
        except GatewayError:
            # retry once per item so a single bad text only drops itself
            vectors = []
            for t in texts:
                try:
                    vectors.append(gateway.embed([t], mask_position_mode=True)[0])
                except GatewayError as exc:
                    logger.warning("dropping latent context: %s", exc)
                    vectors.append(None)
        for (a, b, sid, score, _text), vec in zip(pending, vectors):
            if vec is None:
                continue
            relations.append(
                LatentRelation(
                    LatentRelation.make_id(a, b, sid), a, b, sid, score, vec
                )
            )
    dim = relations[0].vector.shape[0] if relations else 0
    return LatentPool(relations, dim)
