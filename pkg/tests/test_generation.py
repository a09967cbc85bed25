"""Answer generation: evidence rendering, prompt assembly, and answer
extraction."""

from pathlib import Path

from relink.explorer import EvidenceGraph, QueryRecord
from relink.gateway import GatewayConfig, LlmGateway, MockBackend, MockChatRule
from relink.generation import (
    build_generation_prompt,
    extract_answer_string,
    generate_answer,
    load_templates,
    render_evidence,
)
from relink.kg import FactTriple

DATA = Path(__file__).parent / "data"

NAMES = {"bach": "Bach", "eisenach": "Eisenach", "thuringia": "Thuringia"}


def _evidence():
    t1 = FactTriple.make("bach", "born in", "eisenach", "s#0")
    t2 = FactTriple.make("eisenach", "located in", "thuringia", "s#1")
    return EvidenceGraph(
        triples=[t1, t2],
        source_sentences={
            "s#0": "Bach was born in Eisenach.",
            "s#1": "Eisenach lies in Thuringia.",
        },
    )


def _gateway(rules=None, default=""):
    return LlmGateway(GatewayConfig(backend="mock", retry_backoff=0.0),
                      MockBackend(rules or [], default_reply=default))


class TestLoadTemplates:
    def test_packaged_templates_complete(self):
        templates = load_templates()
        assert set(templates) == {
            "extraction", "topic_entities", "fine_rerank", "instantiate",
            "completeness", "generate", "generate_fallback", "extract_answer",
        }

    def test_external_directory_wins(self, tmp_path):
        for name in load_templates():
            (tmp_path / f"{name}.txt").write_text(f"custom {name} {{query}}")
        templates = load_templates(tmp_path)
        assert templates["generate"].startswith("custom generate")


class TestRenderEvidence:
    def test_line_format_and_order(self):
        lines = render_evidence(_evidence(), NAMES).splitlines()
        assert lines == [
            "Bach — born in — Eisenach [source: Bach was born in Eisenach.]",
            "Eisenach — located in — Thuringia "
            "[source: Eisenach lies in Thuringia.]",
        ]


class TestBuildGenerationPrompt:
    QUERY = QueryRecord("q1", "Where was Bach born?")

    def test_matches_golden_prompt(self):
        prompt, fallback = build_generation_prompt(
            self.QUERY, _evidence(), NAMES, load_templates())
        assert not fallback
        assert prompt == (DATA / "golden_generate_prompt.txt").read_text()

    def test_empty_evidence_uses_fallback(self):
        prompt, fallback = build_generation_prompt(
            self.QUERY, EvidenceGraph(), NAMES, load_templates())
        assert fallback
        assert "Evidence" not in prompt
        assert self.QUERY.text in prompt


class TestGenerateAnswer:
    QUERY = QueryRecord("q1", "Where was Bach born?")

    def test_reply_recorded(self):
        gateway = _gateway([MockChatRule("using only the evidence",
                                         " Eisenach \n")])
        rec = generate_answer(self.QUERY, _evidence(), gateway, NAMES,
                              load_templates())
        assert rec.answer == "Eisenach"
        assert rec.raw_reply == " Eisenach \n"
        assert rec.error is None and not rec.fallback_used

    def test_gateway_failure_reported(self):
        def boom(prompt, m):
            raise RuntimeError("down")

        gateway = LlmGateway(
            GatewayConfig(backend="mock", retry_backoff=0.0, max_retries=0),
            MockBackend([MockChatRule(".", boom)]),
        )
        rec = generate_answer(self.QUERY, _evidence(), gateway, NAMES,
                              load_templates())
        assert rec.error is not None
        assert rec.answer == ""


class TestExtractAnswerString:
    def test_extraction_reply_used(self):
        gateway = _gateway([MockChatRule("minimal answer span", "Eisenach")])
        got = extract_answer_string("He was born in Eisenach.", "q", gateway,
                                    load_templates())
        assert got == "Eisenach"

    def test_empty_extraction_falls_back(self):
        gateway = _gateway(default="")
        got = extract_answer_string("  Eisenach.  ", "q", gateway,
                                    load_templates())
        assert got == "Eisenach."

    def test_gateway_failure_falls_back(self):
        def boom(prompt, m):
            raise RuntimeError("down")

        gateway = LlmGateway(
            GatewayConfig(backend="mock", retry_backoff=0.0, max_retries=0),
            MockBackend([MockChatRule(".", boom)]),
        )
        assert extract_answer_string("Eisenach", "q", gateway,
                                     load_templates()) == "Eisenach"

    def test_empty_reply_short_circuits(self):
        gateway = _gateway([MockChatRule(".", "should never be asked")])
        assert extract_answer_string("   ", "q", gateway, load_templates()) == ""
        assert gateway.backend.chat_calls == 0
