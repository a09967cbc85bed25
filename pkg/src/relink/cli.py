"""Operator CLI: build stores, train models, answer queries, run
evaluations and sweeps."""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from pathlib import Path


from . import config as config_mod
from . import corpus as corpus_mod
from . import evaluation as eval_mod
from .errors import MissingArtifactError, RelinkError
from .explorer import ExploreConfig, QueryRecord
from .gateway import GatewayConfig, LlmGateway
from .generation import load_templates
from .kg import GraphBackbone, extract_backbone
from .latent import LatentPool, PoolConfig, build_pool, count_cooccurrences
from .pipeline import (
    VARIANTS,
    RelinkPipeline,
    make_featurizer,
    mine_alignment_pairs,
)
from .ranker import RankerModel, StagedConfig, mine_preferences, staged_train
from .space import ProjectionAdapter

logger = logging.getLogger(__name__)


@contextlib.contextmanager
def _store_lock(store_dir: Path):
    """Exclusive-create lock file to keep two writers out of one store."""
    store_dir.mkdir(parents=True, exist_ok=True)
    lock_path = store_dir / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RelinkError(f"store {store_dir} is locked by another writer "
                          f"(remove {lock_path} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock_path)


class Workspace:
    """File layout under the configured store/output directories."""

    def __init__(self, config: dict):
        self.config = config
        self.store_dir = Path(config["paths"]["store_dir"])
        self.out_dir = Path(config["paths"]["out_dir"])
        self.hash = config_mod.config_hash(config)

    corpus_store = property(lambda s: s.store_dir / "corpus_store.json")
    backbone = property(lambda s: s.store_dir / "backbone.json")
    pool_meta = property(lambda s: s.store_dir / "pool_meta.json")
    pool_vectors = property(lambda s: s.store_dir / "pool_vectors.f32")
    adapter_header = property(lambda s: s.store_dir / "adapter.json")
    adapter_weights = property(lambda s: s.store_dir / "adapter.f32")
    ranker_header = property(lambda s: s.store_dir / "ranker.json")
    ranker_weights = property(lambda s: s.store_dir / "ranker.f32")

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(str(path), hint)
        return path

    def gateway(self, args) -> LlmGateway:
        gw = dict(self.config["gateway"])
        if args.transcript:
            gw["transcript_path"] = args.transcript
            if gw["transcript_mode"] == "off":
                gw["transcript_mode"] = "replay"
        if getattr(args, "transcript_mode", None):
            gw["transcript_mode"] = args.transcript_mode
        return LlmGateway(GatewayConfig(**gw))

    def templates(self) -> dict:
        return load_templates(self.config["paths"]["templates_dir"])

    def load_stores(self):
        store = corpus_mod.CorpusStore.load(
            self.require(self.corpus_store, "relink build-kg"))
        backbone = GraphBackbone.load(
            self.require(self.backbone, "relink build-kg"))
        self.require(self.pool_meta, "relink build-pool")
        pool = LatentPool.load(self.pool_meta, self.pool_vectors)
        return store, backbone, pool

    def load_models(self):
        self.require(self.adapter_header, "relink train")
        self.require(self.ranker_header, "relink train")
        adapter = ProjectionAdapter.load(self.adapter_header, self.adapter_weights)
        ranker = RankerModel.load(self.ranker_header, self.ranker_weights)
        return adapter, ranker

    def explore_config(self) -> ExploreConfig:
        e = self.config["explore"]
        return ExploreConfig(
            beam_width=e["beam_width"], shortlist_size=e["shortlist_size"],
            max_hops=e["max_hops"], completeness_check=e["completeness_check"],
            completeness_min_ds=e["completeness_min_ds"],
        )

    def pipeline(self, variant, gateway, store=None, backbone=None, pool=None,
                 adapter=None, ranker=None) -> RelinkPipeline:
        if store is None:
            store, backbone, pool = self.load_stores()
        if adapter is None:
            adapter, ranker = self.load_models()
        return RelinkPipeline(store, backbone, pool, adapter, ranker, gateway,
                              self.templates(), self.explore_config(), variant)


def cmd_build_kg(ws: Workspace, args) -> int:
    gateway = ws.gateway(args)
    catalog = corpus_mod.EntityCatalog.from_jsonl(ws.config["paths"]["catalog"])
    store = corpus_mod.ingest_corpus(ws.config["paths"]["corpus"])
    store = corpus_mod.annotate_mentions(store, catalog)
    backbone = extract_backbone(store, gateway, ws.templates()["extraction"],
                                catalog)
    with _store_lock(ws.store_dir):
        store.save(ws.corpus_store)
        backbone.save(ws.backbone)
    stats = backbone.extraction_stats
    print(f"backbone: {len(backbone.triples)} triples from "
          f"{stats.sentences_prompted} sentences "
          f"({stats.triples_rejected} rejected) [config {ws.hash}]")
    return 0


def cmd_build_pool(ws: Workspace, args) -> int:
    gateway = ws.gateway(args)
    store = corpus_mod.CorpusStore.load(
        ws.require(ws.corpus_store, "relink build-kg"))
    backbone = GraphBackbone.load(ws.require(ws.backbone, "relink build-kg"))
    stats = count_cooccurrences(store)
    p = ws.config["pool"]
    pool = build_pool(
        store, stats, gateway,
        PoolConfig(p["tau_c"], p["alpha"], p["max_contexts_per_pair"],
                   p["clamp_at_zero"]),
        {e.entity_id: e.name for e in backbone.catalog.entries},
    )
    with _store_lock(ws.store_dir):
        pool.save(ws.pool_meta, ws.pool_vectors)
    print(f"pool: {len(pool)} latent relations over {stats.total_units} "
          f"sentences [config {ws.hash}]")
    return 0


def cmd_train(ws: Workspace, args) -> int:
    gateway = ws.gateway(args)
    store, backbone, pool = ws.load_stores()
    records = eval_mod.load_qa_records(args.dataset)
    seed = ws.config["seed"]
    dim = ws.config["space"]["dim"]
    d_raw = gateway.embed(["probe"])[0].shape[0]
    if dim != d_raw:
        logger.info("overriding space.dim %d with provider dim %d", dim, d_raw)
        dim = d_raw
    # random init: training moves the adapters away from the identity
    # baseline that the wo_contra ablation compares against
    adapter = ProjectionAdapter.random(dim, dim, seed=seed,
                                       tau=ws.config["space"]["tau"])
    ranker = RankerModel.create(dim, seed=seed)
    templates = ws.templates()
    from .explorer import ExplorationContext
    from .kg import InstantiatedOverlay

    ctx = ExplorationContext(store, backbone, pool, InstantiatedOverlay(),
                             adapter, ranker, gateway, templates,
                             ws.explore_config())
    t = ws.config["train"]
    prefs = mine_preferences(records, ctx, t["negatives_per_positive"], seed)
    if not prefs:
        raise RelinkError("no preference tuples could be mined from the dataset")
    x_f, x_l = mine_alignment_pairs(backbone, pool, gateway, ctx.names())
    featurize = make_featurizer(prefs, ctx)
    staged = StagedConfig(
        margin=t["margin"], lr_ranker=t["lr_ranker"], lr_adapter=t["lr_adapter"],
        adapter_batch_size=t["batch_size"], patience=t["patience"],
        max_cycles=t["max_cycles"],
        negatives_per_positive=t["negatives_per_positive"],
        val_fraction=t["val_fraction"], seed=seed,
    )
    ranker, adapter = staged_train(ranker, adapter, featurize, x_f, x_l, staged)
    with _store_lock(ws.store_dir):
        adapter.save(ws.adapter_header, ws.adapter_weights, seed=seed)
        ranker.save(ws.ranker_header, ws.ranker_weights, seed=seed)
    print(f"trained on {len(prefs)} preference tuples, "
          f"{x_f.shape[0]} alignment pairs [config {ws.hash}]")
    return 0


def cmd_query(ws: Workspace, args) -> int:
    gateway = ws.gateway(args)
    pipeline = ws.pipeline(args.variant, gateway)
    record = QueryRecord("cli", args.question)
    answered = pipeline.answer_query(record)
    if answered.error:
        print(f"error: {answered.error}", file=sys.stderr)
        return 1
    print(answered.answer)
    ev = answered.evidence
    if ev is not None and not ev.is_empty():
        names = pipeline.ctx.names()
        print("\nevidence:")
        for t in ev.triples:
            print(f"  {names[t.head]} — {t.predicate} — {names[t.tail]} "
                  f"({t.origin})")
            print(f"    source: {ev.source_sentences[t.provenance]}")
    elif answered.fallback_used:
        print("\n(no evidence path found; closed-book answer)")
    return 0


def _run_and_save(ws: Workspace, pipeline, records, dataset_name, seed):
    result = eval_mod.run_eval(
        records, pipeline, dataset_name,
        sample_size=ws.config["eval"]["sample_size"], seed=seed,
        config_hash=ws.hash,
    )
    ws.out_dir.mkdir(parents=True, exist_ok=True)
    stem = ws.out_dir / f"eval_{dataset_name}_{pipeline.variant}"
    result.save_json(stem.with_suffix(".json"))
    result.save_csv(stem.with_suffix(".csv"))
    return result


def cmd_eval(ws: Workspace, args) -> int:
    gateway = ws.gateway(args)
    records = eval_mod.load_qa_records(args.dataset)
    pipeline = ws.pipeline(args.variant, gateway)
    name = Path(args.dataset).stem
    result = _run_and_save(ws, pipeline, records, name, ws.config["seed"])
    print(f"{result.variant}: EM {result.em:.4f} F1 {result.f1:.4f} "
          f"({len(result.per_question)} questions) [config {ws.hash}]")
    return 0


def cmd_ablate(ws: Workspace, args) -> int:
    gateway = ws.gateway(args)
    records = eval_mod.load_qa_records(args.dataset)
    name = Path(args.dataset).stem
    store, backbone, pool = ws.load_stores()
    adapter, ranker = ws.load_models()
    rows = []
    for variant in VARIANTS:
        pipeline = RelinkPipeline(store, backbone, pool, adapter, ranker,
                                  gateway, ws.templates(), ws.explore_config(),
                                  variant)
        result = _run_and_save(ws, pipeline, records, name, ws.config["seed"])
        rows.append((variant, result.em, result.f1))
        print(f"{variant:12s} EM {result.em:.4f} F1 {result.f1:.4f}")
    ws.out_dir.mkdir(parents=True, exist_ok=True)
    with open(ws.out_dir / f"ablation_{name}.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "em", "f1", "config_hash", "seed"])
        for variant, em, f1 in rows:
            writer.writerow([variant, f"{em:.6f}", f"{f1:.6f}", ws.hash,
                             ws.config["seed"]])
    return 0


def cmd_sweep(ws: Workspace, args) -> int:
    gateway = ws.gateway(args)
    records = eval_mod.load_qa_records(args.dataset)
    name = Path(args.dataset).stem
    store, backbone, pool = ws.load_stores()
    adapter, ranker = ws.load_models()
    fractions = [float(f) for f in args.fractions.split(",")]
    if any(f < 0 or f > 1 for f in fractions):
        raise RelinkError("fractions must lie in [0, 1]")

    def make_pipeline(variant, masked):
        return RelinkPipeline(store, masked, pool, adapter, ranker, gateway,
                              ws.templates(), ws.explore_config(), variant)

    results = eval_mod.sparsity_sweep(records, make_pipeline, backbone,
                                      fractions, ws.config["seed"], name,
                                      ws.hash)
    ws.out_dir.mkdir(parents=True, exist_ok=True)
    out = ws.out_dir / f"sweep_{name}.csv"
    eval_mod.save_sweep_csv(results, out)
    for r in results:
        print(f"keep {r.keep_fraction:.2f} {r.variant:8s} "
              f"EM {r.em:.4f} F1 {r.f1:.4f}")
    print(f"wrote {out} [config {ws.hash}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relink",
        description="Dynamic evidence-graph construction for multi-hop QA",
    )
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--transcript", default=None,
                       help="transcript file for record/replay")
        p.add_argument("--transcript-mode", default=None,
                       choices=["off", "record", "replay"])
        return p

    common(sub.add_parser("build-kg", help="ingest corpus, extract backbone"))
    common(sub.add_parser("build-pool", help="build the latent relation pool"))
    p = common(sub.add_parser("train", help="staged ranker/adapter training"))
    p.add_argument("--dataset", required=True)
    p = common(sub.add_parser("query", help="answer one question"))
    p.add_argument("--question", required=True)
    p.add_argument("--variant", default="full", choices=VARIANTS)
    p = common(sub.add_parser("eval", help="evaluate on a QA dataset"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", default="full", choices=VARIANTS)
    p = common(sub.add_parser("ablate", help="evaluate all five variants"))
    p.add_argument("--dataset", required=True)
    p = common(sub.add_parser("sweep", help="edge-removal sparsity sweep"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--fractions", default="1.0,0.5,0.1")
    return parser


_COMMANDS = {
    "build-kg": cmd_build_kg,
    "build-pool": cmd_build_pool,
    "train": cmd_train,
    "query": cmd_query,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = config_mod.load_config(args.config, args.set)
        if args.seed is not None:
            config["seed"] = args.seed
        ws = Workspace(config)
        return _COMMANDS[args.command](ws, args)
    except RelinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
