"""Final answer generation from the evidence graph, with per-triple
sentence grounding, plus answer-string extraction for scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources

from .errors import GatewayError
from .explorer import EvidenceGraph, QueryRecord

logger = logging.getLogger(__name__)

_TEMPLATE_NAMES = (
    "extraction", "topic_entities", "fine_rerank", "instantiate",
    "completeness", "generate", "generate_fallback", "extract_answer",
)


def load_templates(directory=None) -> dict[str, str]:
    """Load prompt templates by name, from the packaged defaults or an
    external template directory."""
    templates = {}
    if directory is not None:
        from pathlib import Path as _P

        for name in _TEMPLATE_NAMES:
            templates[name] = (_P(directory) / f"{name}.txt").read_text("utf-8")
        return templates
    pkg = resources.files("relink") / "templates"
    for name in _TEMPLATE_NAMES:
        templates[name] = (pkg / f"{name}.txt").read_text("utf-8")
    return templates


@dataclass
class AnswerRecord:
    query_id: str
    raw_reply: str
    answer: str
    evidence: EvidenceGraph
    fallback_used: bool = False
    error: str | None = None


def render_evidence(ev: EvidenceGraph, names: dict[str, str]) -> str:
    """One line per triple, path order: "h — p — t [source: sentence]"."""
    lines = []
    for t in ev.triples:
        sentence = ev.source_sentences[t.provenance]
        lines.append(
            f"{names[t.head]} — {t.predicate} — {names[t.tail]} "
            f"[source: {sentence}]"
        )
    return "\n".join(lines)


def build_generation_prompt(query: QueryRecord, ev: EvidenceGraph,
                            names: dict[str, str],
                            templates: dict[str, str]) -> tuple[str, bool]:
    """Render the generation prompt; returns (prompt, fallback_used)."""
    if ev.is_empty():
        return templates["generate_fallback"].format(query=query.text), True
    evidence = render_evidence(ev, names)
    return templates["generate"].format(query=query.text, evidence=evidence), False


def generate_answer(query: QueryRecord, ev: EvidenceGraph, gateway,
                    names: dict[str, str],
                    templates: dict[str, str]) -> AnswerRecord:
    prompt, fallback = build_generation_prompt(query, ev, names, templates)
    try:
        reply = gateway.chat(prompt)
    except GatewayError as exc:
        logger.warning("generation failed for %s: %s", query.query_id, exc)
        return AnswerRecord(query.query_id, "", "", ev, fallback, error=str(exc))
    return AnswerRecord(query.query_id, reply, reply.strip(), ev, fallback)


def extract_answer_string(raw_reply: str, query_text: str, gateway,
                          templates: dict[str, str]) -> str:
    """Ask the gateway for the minimal answer span; fall back to the
    trimmed reply when extraction comes back empty or fails."""
    fallback = raw_reply.strip()
    if not fallback:
        return ""
    prompt = templates["extract_answer"].format(query=query_text, reply=raw_reply)
    try:
        extracted = gateway.chat(prompt).strip()
    except GatewayError:
        return fallback
    return extracted or fallback
