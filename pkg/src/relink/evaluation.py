"""EM/F1 scoring, benchmark runs, ablation matrices, and the
knowledge-sparsity robustness sweep."""

from __future__ import annotations

import csv
import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import CorpusFormatError, RelinkError

logger = logging.getLogger(__name__)

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, strip punctuation, drop whole-token articles, collapse
    whitespace (the conventional QA normalization)."""
    s = s.lower()
    s = s.translate(_PUNCT_TABLE)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def exact_match(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def token_f1(pred: str, gold: str) -> float:
    """Multiset token overlap F1 over normalized strings; both empty -> 1,
    exactly one empty -> 0."""
    pred_tokens = normalize_answer(pred).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


@dataclass
class QuestionResult:
    query_id: str
    em: int
    f1: float
    fallback_used: bool
    answer: str = ""
    error: str | None = None


@dataclass
class EvalResult:
    dataset: str
    variant: str
    keep_fraction: float
    em: float
    f1: float
    per_question: list[QuestionResult] = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "variant": self.variant,
            "keep_fraction": self.keep_fraction,
            "em": self.em,
            "f1": self.f1,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "per_question": [
                {
                    "query_id": r.query_id,
                    "em": r.em,
                    "f1": r.f1,
                    "fallback_used": r.fallback_used,
                    "answer": r.answer,
                    "error": r.error,
                }
                for r in self.per_question
            ],
        }

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, sort_keys=True,
                      indent=1)
            fh.write("\n")

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["query_id", "em", "f1", "fallback_used", "config_hash", "seed"]
            )
            for r in self.per_question:
                writer.writerow([r.query_id, r.em, f"{r.f1:.6f}",
                                 int(r.fallback_used), self.config_hash,
                                 self.seed])


def load_qa_records(path) -> list[dict]:
    """JSON-lines QA dataset: {"query_id", "question", "answer",
    "topic_entities": [...], "supporting": [...]}."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(path, line_no, f"bad JSON: {exc}")
            for key in ("query_id", "question", "answer"):
                if key not in rec:
                    raise CorpusFormatError(path, line_no, f"missing field {key!r}")
            records.append(rec)
    return records


def run_eval(records: list[dict], pipeline, dataset_name: str = "",
             sample_size: int | None = None, seed: int = 0,
             keep_fraction: float = 1.0, config_hash: str = "") -> EvalResult:
    """Answer every (sampled) question through the pipeline and aggregate
    mean EM/F1. Per-question failures score 0 and never abort the run."""
    if not records:
        raise RelinkError("empty evaluation dataset")
    if sample_size is not None and sample_size < len(records):
        rng = np.random.default_rng(seed)
        idx = sorted(rng.choice(len(records), size=sample_size, replace=False))
        records = [records[i] for i in idx]
    per_question: list[QuestionResult] = []
    for rec in records:
        gold = rec["answer"]
        try:
            answered = pipeline.answer_query(rec)
        except Exception as exc:  # a broken question must not kill the sweep
            logger.warning("question %s failed: %s", rec["query_id"], exc)
            per_question.append(
                QuestionResult(rec["query_id"], 0, 0.0, True, error=str(exc))
            )
            continue
        if answered.error:
            per_question.append(
                QuestionResult(rec["query_id"], 0, 0.0, answered.fallback_used,
                               answered.answer, answered.error)
            )
            continue
        per_question.append(
            QuestionResult(
                rec["query_id"],
                exact_match(answered.answer, gold),
                token_f1(answered.answer, gold),
                answered.fallback_used,
                answered.answer,
            )
        )
    per_question.sort(key=lambda r: r.query_id)
    em = float(np.mean([r.em for r in per_question]))
    f1 = float(np.mean([r.f1 for r in per_question]))
    return EvalResult(dataset_name, pipeline.variant, keep_fraction, em, f1,
                      per_question, config_hash, seed)


def sparsity_sweep(records: list[dict], make_pipeline, backbone, fractions,
                   seed: int = 0, dataset_name: str = "",
                   config_hash: str = "") -> list[EvalResult]:
    """For each keep_fraction, mask the explicit graph and evaluate both
    the full variant and the pool-ablated variant.

    make_pipeline(variant, backbone) must return a fresh pipeline wired to
    the masked graph.
    """
    results = []
    for fraction in fractions:
        masked = backbone.apply_edge_mask(fraction, seed)
        for variant in ("full", "wo_pool"):
            pipeline = make_pipeline(variant, masked)
            result = run_eval(records, pipeline, dataset_name, seed=seed,
                              keep_fraction=fraction, config_hash=config_hash)
            results.append(result)
    return results


def save_sweep_csv(results: list[EvalResult], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["keep_fraction", "variant", "em", "f1",
                         "config_hash", "seed"])
        for r in results:
            writer.writerow([r.keep_fraction, r.variant, f"{r.em:.6f}",
                             f"{r.f1:.6f}", r.config_hash, r.seed])
