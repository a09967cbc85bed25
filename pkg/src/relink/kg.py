"""Explicit factual graph with sentence-level provenance, plus the
append-only overlay of triples instantiated at query time."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

from .corpus import CorpusStore, EntityCatalog
from .errors import GatewayError, SelfLoopError, UnknownEntityError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ORIGIN_EXPLICIT = "explicit"
ORIGIN_INSTANTIATED = "instantiated"


def _content_id(prefix: str, *parts: str) -> str:
    digest = hashlib.sha1("\x1f".join(parts).encode("utf-8")).hexdigest()
    return f"{prefix}_{digest[:12]}"


@dataclass(frozen=True)
class FactTriple:
    triple_id: str
    head: str
    predicate: str
    tail: str
    provenance: str
    origin: str = ORIGIN_EXPLICIT
    confidence: float = 1.0

    def __post_init__(self):
        if self.head == self.tail:
            raise SelfLoopError(f"self-loop on {self.head!r}")
        if not self.predicate:
            raise ValueError("empty predicate")

    @classmethod
    def make(cls, head, predicate, tail, provenance, origin=ORIGIN_EXPLICIT,
             confidence=1.0) -> "FactTriple":
        tid = _content_id("t", head, predicate, tail, provenance, origin)
        return cls(tid, head, predicate, tail, provenance, origin, confidence)

    def other_end(self, entity_id: str) -> str:
        return self.tail if entity_id == self.head else self.head


@dataclass
class ExtractionStats:
    sentences_prompted: int = 0
    sentences_skipped: int = 0
    triples_accepted: int = 0
    triples_rejected: int = 0


class GraphBackbone:
    """Immutable explicit graph: entities, deduplicated triples, adjacency."""

    def __init__(self, catalog: EntityCatalog, triples: list[FactTriple]):
        self.catalog = catalog
        self.triples: dict[str, FactTriple] = {}
        self._by_hpt: dict[tuple[str, str, str], str] = {}
        self._pairs: set[tuple[str, str]] = set()
        self.adjacency: dict[str, list[str]] = {}
        self.extraction_stats: ExtractionStats | None = None
        for t in triples:
            self._add(t)
        for tids in self.adjacency.values():
            tids.sort()

    def _add(self, t: FactTriple) -> None:
        key = (t.head, t.predicate, t.tail)
        if key in self._by_hpt:
            return
        self._by_hpt[key] = t.triple_id
        self._pairs.add((t.head, t.tail))
        self.triples[t.triple_id] = t
        self.adjacency.setdefault(t.head, []).append(t.triple_id)
        self.adjacency.setdefault(t.tail, []).append(t.triple_id)

    def has_pair(self, a: str, b: str) -> bool:
        return (a, b) in self._pairs or (b, a) in self._pairs

    def neighbors_explicit(self, entity_id: str) -> list[FactTriple]:
        if entity_id not in self.catalog:
            raise UnknownEntityError(entity_id)
        return [self.triples[tid] for tid in self.adjacency.get(entity_id, [])]

    def apply_edge_mask(self, keep_fraction: float, seed: int) -> "GraphBackbone":
        """Copy retaining round(keep_fraction * |triples|) triples chosen by a
        seeded shuffle; all entities are preserved."""
        import random

        tids = sorted(self.triples)
        rng = random.Random(seed)
        rng.shuffle(tids)
        n_keep = int(keep_fraction * len(tids) + 0.5)
        kept = sorted(tids[:n_keep])
        return GraphBackbone(self.catalog, [self.triples[tid] for tid in kept])

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "entities": [
                {"entity_id": e.entity_id, "name": e.name, "aliases": list(e.aliases)}
                for e in self.catalog.entries
            ],
            "triples": [
                {
                    "h": t.head,
                    "p": t.predicate,
                    "t": t.tail,
                    "provenance": t.provenance,
                    "origin": t.origin,
                    "confidence": t.confidence,
                }
                for tid, t in sorted(self.triples.items())
            ],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, obj: dict) -> "GraphBackbone":
        from .corpus import CatalogEntry

        catalog = EntityCatalog(
            [
                CatalogEntry(e["entity_id"], e["name"], tuple(e["aliases"]))
                for e in obj["entities"]
            ]
        )
        triples = [
            FactTriple.make(
                t["h"], t["p"], t["t"], t["provenance"], t["origin"], t["confidence"]
            )
            for t in obj["triples"]
        ]
        return cls(catalog, triples)

    @classmethod
    def load(cls, path) -> "GraphBackbone":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def __eq__(self, other):
        if not isinstance(other, GraphBackbone):
            return NotImplemented
        return self.to_dict() == other.to_dict()


class InstantiatedOverlay:
    """Append-only store for triples produced by dynamic instantiation.

    Deduplication key is (head, predicate, tail, provenance); re-adding an
    identical triple returns the existing id.
    """

    def __init__(self):
        self._by_key: dict[tuple[str, str, str, str], FactTriple] = {}
        self._adjacency: dict[str, list[str]] = {}
        self._by_id: dict[str, FactTriple] = {}

    def __len__(self):
        return len(self._by_key)

    def add_instantiated(self, t: FactTriple) -> str:
        if t.origin != ORIGIN_INSTANTIATED:
            raise ValueError("overlay accepts instantiated triples only")
        key = (t.head, t.predicate, t.tail, t.provenance)
        existing = self._by_key.get(key)
        if existing is not None:
            return existing.triple_id
        self._by_key[key] = t
        self._by_id[t.triple_id] = t
        self._adjacency.setdefault(t.head, []).append(t.triple_id)
        self._adjacency.setdefault(t.tail, []).append(t.triple_id)
        return t.triple_id

    def get(self, triple_id: str) -> FactTriple:
        return self._by_id[triple_id]

    def neighbors(self, entity_id: str) -> list[FactTriple]:
        return [self._by_id[tid] for tid in sorted(self._adjacency.get(entity_id, []))]


def parse_triple_reply(reply: str) -> list[dict]:
    """Parse an extraction/instantiation reply into triple dicts.

    Accepts a JSON object/array with h/p/t fields, or pipe-separated
    "h | p | t" lines.
    """
    reply = reply.strip()
    if not reply:
        return []
    try:
        obj = json.loads(reply)
    except json.JSONDecodeError:
        obj = None
    if obj is not None:
        if isinstance(obj, dict):
            obj = [obj]
        out = []
        for item in obj:
            if isinstance(item, dict) and {"h", "p", "t"} <= set(item):
                out.append(item)
        return out
    out = []
    for line in reply.splitlines():
        parts = [p.strip() for p in line.split("|")]
        if len(parts) == 3 and all(parts):
            out.append({"h": parts[0], "p": parts[1], "t": parts[2]})
    return out


def extract_backbone(store: CorpusStore, gateway, template: str,
                     catalog: EntityCatalog) -> GraphBackbone:
    """Prompt the gateway once per multi-mention sentence and assemble the
    validated, deduplicated explicit graph.

    Gateway failures skip the sentence (the backbone may be partial);
    triples naming entities not mentioned in the sentence are rejected.
    """
    stats = ExtractionStats()
    triples: list[FactTriple] = []
    for sent in store.iter_sentences():
        mentioned = sent.entity_ids()
        if len(mentioned) < 2:
            continue
        names = sorted(catalog.name_of(e) for e in mentioned)
        prompt = template.format(sentence=sent.text, entities=", ".join(names))
        try:
            reply = gateway.chat(prompt)
        except GatewayError as exc:
            logger.warning("extraction skipped for %s: %s", sent.sentence_id, exc)
            stats.sentences_skipped += 1
            continue
        stats.sentences_prompted += 1
        for item in parse_triple_reply(reply):
            h = catalog.resolve_surface(str(item["h"]))
            t = catalog.resolve_surface(str(item["t"]))
            p = str(item["p"]).strip()
            if h is None or t is None or h not in mentioned or t not in mentioned \
                    or not p or h == t:
                stats.triples_rejected += 1
                continue
            conf = float(item.get("confidence", 1.0))
            triples.append(
                FactTriple.make(h, p, t, sent.sentence_id, ORIGIN_EXPLICIT, conf)
            )
            stats.triples_accepted += 1
    backbone = GraphBackbone(catalog, triples)
    backbone.extraction_stats = stats
    return backbone
