"""Query-driven beam search over the heterogeneous edge space: candidate
expansion, coarse-to-fine ranking, running-average score bookkeeping,
dynamic instantiation of latent relations, and termination."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import CorpusStore, EntityCatalog, find_mentions
from .errors import (
    GatewayError,
    InstantiationFailedError,
    NoTopicEntityError,
    ZeroVectorError,
)
from .kg import (
    ORIGIN_INSTANTIATED,
    FactTriple,
    GraphBackbone,
    InstantiatedOverlay,
    parse_triple_reply,
)
from .latent import LatentPool, LatentRelation
from .space import ProjectionAdapter, linearize_triple

logger = logging.getLogger(__name__)

KIND_EXPLICIT = "explicit"
KIND_LATENT = "latent"
KIND_INSTANTIATED = "instantiated"

STATUS_ACTIVE = "active"
STATUS_COMPLETE = "complete"
STATUS_DEAD = "dead"


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str
    topic_entities: tuple[str, ...] = ()
    gold_answer: str | None = None


@dataclass(frozen=True)
class PathEdge:
    kind: str            # explicit | latent | instantiated
    ref_id: str          # triple_id or latent_id
    from_entity: str     # traversal orientation, independent of storage
    to_entity: str
    display_text: str


@dataclass(frozen=True)
class Path:
    start_entity: str
    edges: tuple[PathEdge, ...] = ()
    ds_log: tuple[float, ...] = ()
    avg_score: float = 0.0
    status: str = STATUS_ACTIVE

    @property
    def k(self) -> int:
        return len(self.edges)

    @property
    def frontier(self) -> str:
        return self.edges[-1].to_entity if self.edges else self.start_entity

    def visited(self) -> set[str]:
        seen = {self.start_entity}
        seen.update(e.to_entity for e in self.edges)
        return seen

    def extend(self, edge: PathEdge, ds: float) -> "Path":
        new_avg = update_path_score(self.avg_score, self.k + 1, ds)
        return replace(
            self,
            edges=self.edges + (edge,),
            ds_log=self.ds_log + (ds,),
            avg_score=new_avg,
        )


@dataclass
class EvidenceGraph:
    triples: list[FactTriple] = field(default_factory=list)
    source_sentences: dict[str, str] = field(default_factory=dict)
    paths: list[Path] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not self.triples


@dataclass
class ExploreConfig:
    beam_width: int = 4          # K: paths retained per iteration
    shortlist_size: int = 8      # M: candidates surviving the coarse stage
    max_hops: int = 4            # L_max
    completeness_check: bool = True
    completeness_min_ds: float = 0.5


@dataclass
class CallCounters:
    neighbors_explicit: int = 0
    neighbors_latent: int = 0
    ranker_score: int = 0
    cosine_score: int = 0
    fine_rerank: int = 0
    instantiations: int = 0
    completeness_checks: int = 0


class ExplorationContext:
    """Everything one query exploration needs, plus variant wiring.

    score_mode "ranker" uses the trained coarse scorer; "cosine" scores by
    cosine similarity between raw gateway embeddings (the ranker-ablated
    baseline). use_backbone / use_pool gate the two knowledge sources.
    """

    def __init__(self, store: CorpusStore, backbone: GraphBackbone,
                 pool: LatentPool, overlay: InstantiatedOverlay,
                 adapter: ProjectionAdapter, ranker, gateway,
                 templates: dict[str, str], config: ExploreConfig,
                 score_mode: str = "ranker", use_backbone: bool = True,
                 use_pool: bool = True):
        self.store = store
        self.backbone = backbone
        self.catalog = backbone.catalog
        self.pool = pool
        self.overlay = overlay
        self.adapter = adapter
        self.ranker = ranker
        self.gateway = gateway
        self.templates = templates
        self.config = config
        self.score_mode = score_mode
        self.use_backbone = use_backbone
        self.use_pool = use_pool
        self.counters = CallCounters()
        self.trace: list[dict] = []
        self._raw_cache: dict[str, np.ndarray] = {}
        self._instantiation_memo: dict[tuple[str, str], FactTriple] = {}

    # -- embedding helpers ------------------------------------------------

    def raw_embed(self, text: str) -> np.ndarray:
        vec = self._raw_cache.get(text)
        if vec is None:
            vec = self.gateway.embed([text])[0]
            self._raw_cache[text] = vec
        return vec

    def names(self) -> dict[str, str]:
        return {e.entity_id: e.name for e in self.catalog.entries}

    def name_of(self, entity_id: str) -> str:
        return self.catalog.name_of(entity_id)

    def resolve_triple(self, edge: PathEdge) -> FactTriple:
        if edge.kind == KIND_EXPLICIT:
            return self.backbone.triples[edge.ref_id]
        return self.overlay.get(edge.ref_id)

    def edge_raw_vector(self, edge: PathEdge) -> np.ndarray:
        if edge.kind == KIND_LATENT:
            return np.asarray(self.pool.get(edge.ref_id).vector, dtype=np.float64)
        triple = self.resolve_triple(edge)
        return self.raw_embed(linearize_triple(triple, self.names()))

    def edge_vector(self, edge: PathEdge) -> np.ndarray:
        if edge.kind == KIND_LATENT:
            return self.adapter.project_latent(self.edge_raw_vector(edge))
        return self.adapter.project_factual(self.edge_raw_vector(edge))

    def query_vector(self, query_text: str) -> np.ndarray:
        # query goes through the factual-side projection
        return self.adapter.project_factual(self.raw_embed(query_text))


def update_path_score(prev_avg: float, k: int, ds: float) -> float:
    """Running average recursion: ((k-1)*prev + ds)/k; prev is ignored for
    the first step."""
    if k < 1:
        raise ValueError("step count must be >= 1")
    if k == 1:
        prev_avg = 0.0
    return ((k - 1) * prev_avg + ds) / k


def identify_topic_entities(query_text: str, catalog: EntityCatalog, gateway,
                            template: str) -> list[str]:
    """Dictionary longest-match against the catalog; on no match, ask the
    gateway for entity names and validate each against the catalog."""
    if not len(catalog):
        raise NoTopicEntityError("empty entity catalog")
    mentions = find_mentions(query_text, catalog)
    found: list[str] = []
    for m in mentions:
        if m.entity_id not in found:
            found.append(m.entity_id)
    if found:
        return found
    try:
        reply = gateway.chat(template.format(query=query_text))
    except GatewayError:
        reply = ""
    for part in re.split(r"[,\n;]", reply):
        entity_id = catalog.resolve_surface(part)
        if entity_id is not None and entity_id not in found:
            found.append(entity_id)
    if not found:
        raise NoTopicEntityError(f"no topic entity for query {query_text!r}")
    return found


def _oriented(frontier: str, triple: FactTriple, kind: str,
              display: str) -> PathEdge:
    return PathEdge(kind, triple.triple_id, frontier,
                    triple.other_end(frontier), display)


def expand_candidates(path: Path, ctx: ExplorationContext) -> list[PathEdge]:
    """One-hop candidates at the path frontier from the explicit graph, the
    instantiated overlay, and the latent pool.

    Cycles are excluded; a latent edge is suppressed when an explicit or
    instantiated candidate already covers the same entity pair.
    """
    frontier = path.frontier
    visited = path.visited()
    names = ctx.names()
    out: list[PathEdge] = []
    covered_pairs: set[frozenset] = set()

    if ctx.use_backbone:
        ctx.counters.neighbors_explicit += 1
        for t in ctx.backbone.neighbors_explicit(frontier):
            other = t.other_end(frontier)
            if other in visited:
                continue
            display = f"{names[t.head]} {t.predicate} {names[t.tail]}"
            out.append(_oriented(frontier, t, KIND_EXPLICIT, display))
            covered_pairs.add(frozenset((frontier, other)))

    for t in ctx.overlay.neighbors(frontier):
        other = t.other_end(frontier)
        if other in visited:
            continue
        pair = frozenset((frontier, other))
        if pair in covered_pairs:
            continue
        display = f"{names[t.head]} {t.predicate} {names[t.tail]}"
        out.append(_oriented(frontier, t, KIND_INSTANTIATED, display))
        covered_pairs.add(pair)

    if ctx.use_pool:
        ctx.counters.neighbors_latent += 1
        for r in ctx.pool.neighbors_latent(frontier):
            other = r.e_j if r.e_i == frontier else r.e_i
            if other in visited:
                continue
            if frozenset((frontier, other)) in covered_pairs:
                continue
            context_text = ctx.store.sentence(r.context).text
            display = (
                f"unlabeled link between {names[r.e_i]} and {names[r.e_j]} "
                f'[context: "{context_text}"]'
            )
            out.append(PathEdge(KIND_LATENT, r.latent_id, frontier, other, display))
    return out


def coarse_rank(candidates: list[PathEdge], path: Path, q_vec: np.ndarray,
                q_raw: np.ndarray, ctx: ExplorationContext) -> list[tuple[PathEdge, float]]:
    """Score every candidate and keep the top-M; ties keep the deterministic
    candidate order. Candidates that fail to encode are dropped."""
    scored: list[tuple[PathEdge, float]] = []
    for edge in candidates:
        try:
            if ctx.score_mode == "cosine":
                raw = ctx.edge_raw_vector(edge)
                denom = np.linalg.norm(q_raw) * np.linalg.norm(raw)
                if denom == 0:
                    raise ZeroVectorError("zero-norm vector in cosine scoring")
                score = float(q_raw @ raw / denom)
                ctx.counters.cosine_score += 1
            else:
                vec = ctx.edge_vector(edge)
                score = ctx.ranker.score(q_vec, vec, path.avg_score)
                ctx.counters.ranker_score += 1
        except (GatewayError, ZeroVectorError) as exc:
            logger.warning("dropping candidate %s: %s", edge.ref_id, exc)
            continue
        scored.append((edge, score))
    scored.sort(key=lambda es: -es[1])  # stable: ties keep candidate order
    return scored[: ctx.config.shortlist_size]


def path_display(path: Path) -> str:
    if not path.edges:
        return "(no steps yet)"
    return " ; ".join(e.display_text for e in path.edges)


def fine_rerank(shortlist: list[PathEdge], path: Path, query_text: str,
                ctx: ExplorationContext) -> list[tuple[PathEdge, float]]:
    """LLM relevance increment per candidate: an integer 0-10 mapped to
    [0, 1]; unparseable or failed replies score 0."""
    out = []
    template = ctx.templates["fine_rerank"]
    for edge in shortlist:
        prompt = template.format(
            query=query_text, path=path_display(path), candidate=edge.display_text
        )
        ctx.counters.fine_rerank += 1
        try:
            reply = ctx.gateway.chat(prompt)
        except GatewayError as exc:
            logger.warning("fine rerank failed for %s: %s", edge.ref_id, exc)
            out.append((edge, 0.0))
            continue
        out.append((edge, _parse_increment(reply)))
    return out


def _parse_increment(reply: str) -> float:
    m = re.search(r"\b(10|\d)\b", reply)
    if m is None:
        logger.warning("unparseable relevance reply %r; scoring 0", reply[:50])
        return 0.0
    return int(m.group(1)) / 10.0


def instantiate(latent: LatentRelation, query_text: str,
                ctx: ExplorationContext) -> FactTriple:
    """Turn a latent relation into a labeled triple via a query-aware
    prompt over its context sentence.

    The produced head/tail must be exactly the latent pair (orientation
    free). Memoized per (latent_id, normalized query).
    """
    memo_key = (latent.latent_id, " ".join(query_text.lower().split()))
    cached = ctx._instantiation_memo.get(memo_key)
    if cached is not None:
        return cached
    context_text = ctx.store.sentence(latent.context).text
    prompt = ctx.templates["instantiate"].format(
        entity_i=ctx.name_of(latent.e_i),
        entity_j=ctx.name_of(latent.e_j),
        context=context_text,
        query=query_text,
    )
    ctx.counters.instantiations += 1
    try:
        reply = ctx.gateway.chat(prompt)
    except GatewayError as exc:
        raise InstantiationFailedError(f"gateway failure: {exc}")
    parsed = parse_triple_reply(reply)
    if not parsed:
        raise InstantiationFailedError(f"unparseable reply {reply[:80]!r}")
    item = parsed[0]
    h = ctx.catalog.resolve_surface(str(item["h"]))
    t = ctx.catalog.resolve_surface(str(item["t"]))
    p = str(item["p"]).strip()
    if {h, t} != {latent.e_i, latent.e_j} or not p:
        raise InstantiationFailedError(
            f"reply names wrong entities or empty predicate: {item}"
        )
    triple = FactTriple.make(
        h, p, t, latent.context, ORIGIN_INSTANTIATED,
        float(item.get("confidence", 1.0)),
    )
    tid = ctx.overlay.add_instantiated(triple)
    triple = ctx.overlay.get(tid)
    ctx._instantiation_memo[memo_key] = triple
    return triple


def _check_complete(path: Path, query_text: str, ctx: ExplorationContext) -> bool:
    prompt = ctx.templates["completeness"].format(
        query=query_text, path=path_display(path)
    )
    ctx.counters.completeness_checks += 1
    try:
        reply = ctx.gateway.chat(prompt)
    except GatewayError:
        return False
    return reply.strip().lower().startswith("yes")


def build_evidence(paths: list[Path], ctx: ExplorationContext) -> EvidenceGraph:
    ev = EvidenceGraph(paths=list(paths))
    seen: set[str] = set()
    for path in paths:
        for edge in path.edges:
            if edge.kind == KIND_LATENT:
                continue  # latent edges are instantiated before retention
            triple = ctx.resolve_triple(edge)
            if triple.triple_id in seen:
                continue
            seen.add(triple.triple_id)
            ev.triples.append(triple)
            ev.source_sentences[triple.provenance] = \
                ctx.store.sentence(triple.provenance).text
    return ev


def explore(query: QueryRecord, ctx: ExplorationContext) -> EvidenceGraph:
    """Beam search building the query-specific evidence graph.

    Each iteration expands every active path, shortlists candidates with
    the coarse scorer, asks the LLM for relevance increments, retains the
    global top-K extensions (instantiating latent edges on retention, with
    fall-back to the next-best candidate on failure), and optionally marks
    paths complete via a yes/no check.
    """
    cfg = ctx.config
    topic = list(query.topic_entities)
    if not topic:
        topic = identify_topic_entities(
            query.text, ctx.catalog, ctx.gateway, ctx.templates["topic_entities"]
        )
    beam: list[Path] = []
    for e in dict.fromkeys(topic):
        beam.append(Path(start_entity=e))
    completed: list[Path] = []
    q_raw = ctx.raw_embed(query.text)
    q_vec = ctx.query_vector(query.text) if ctx.score_mode == "ranker" else q_raw

    for iteration in range(cfg.max_hops):
        active = [p for p in beam if p.status == STATUS_ACTIVE]
        if not active:
            break
        proposals: list[tuple[float, int, int, Path, PathEdge, float]] = []
        for pi, path in enumerate(active):
            candidates = expand_candidates(path, ctx)
            if not candidates:
                continue  # path dies: no viable extension
            shortlist = coarse_rank(candidates, path, q_vec, q_raw, ctx)
            fine = fine_rerank([e for e, _ in shortlist], path, query.text, ctx)
            for rank_idx, (edge, ds) in enumerate(fine):
                new_avg = update_path_score(path.avg_score, path.k + 1, ds)
                proposals.append((new_avg, pi, rank_idx, path, edge, ds))
                ctx.trace.append({
                    "query_id": query.query_id,
                    "iteration": iteration,
                    "path": path_display(path),
                    "candidate": edge.display_text,
                    "kind": edge.kind,
                    "delta_s": ds,
                    "new_avg": new_avg,
                })
        proposals.sort(key=lambda pr: (-pr[0], pr[1], pr[2]))
        retained: list[Path] = []
        for new_avg, pi, rank_idx, path, edge, ds in proposals:
            if len(retained) >= cfg.beam_width:
                break
            if edge.kind == KIND_LATENT:
                try:
                    triple = instantiate(ctx.pool.get(edge.ref_id), query.text, ctx)
                except InstantiationFailedError as exc:
                    logger.warning("instantiation failed (%s); falling back", exc)
                    continue
                names = ctx.names()
                edge = PathEdge(
                    KIND_INSTANTIATED, triple.triple_id, edge.from_entity,
                    edge.to_entity,
                    f"{names[triple.head]} {triple.predicate} {names[triple.tail]}",
                )
            retained.append(path.extend(edge, ds))
        if not retained:
            break
        next_beam: list[Path] = []
        for child in retained:
            if (cfg.completeness_check
                    and child.ds_log[-1] >= cfg.completeness_min_ds
                    and _check_complete(child, query.text, ctx)):
                completed.append(replace(child, status=STATUS_COMPLETE))
            else:
                next_beam.append(child)
        beam = next_beam
        if not beam:
            break

    if completed:
        chosen = sorted(completed, key=lambda p: -p.avg_score)
    else:
        chosen = sorted(beam, key=lambda p: -p.avg_score)[: cfg.beam_width]
    chosen = [p for p in chosen if p.edges]
    return build_evidence(chosen, ctx)
