"""Single entry point for chat-completion and embedding calls.

Speaks the OpenAI-compatible wire format against any conforming server,
supports transcript record/replay for bit-reproducible runs, and ships
deterministic mock backends for tests and offline experiments.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import GatewayError, ReplayMissError

logger = logging.getLogger(__name__)

TRANSCRIPT_OFF = "off"
TRANSCRIPT_RECORD = "record"
TRANSCRIPT_REPLAY = "replay"


@dataclass
class GatewayConfig:
    base_url: str = "http://localhost:8000/v1"
    api_key_env: str = "RELINK_API_KEY"
    chat_model: str = "deepseek-chat"
    embed_model: str = "text-embedding"
    max_retries: int = 2
    timeout: float = 60.0
    max_in_flight: int = 4
    transcript_mode: str = TRANSCRIPT_OFF
    transcript_path: str | None = None
    retry_backoff: float = 0.5
    backend: str = "http"          # http | mock
    mock_seed: int = 0
    mock_embed_dim: int = 64

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


def request_hash(request: dict) -> str:
    canonical = json.dumps(request, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Transcript:
    """Request-hash keyed response cache persisted as JSON-lines."""

    def __init__(self, path):
        self.path = path
        self.entries: dict[str, dict] = {}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path) -> "Transcript":
        t = cls(path)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    obj = json.loads(line)
                    t.entries[obj["hash"]] = obj["response"]
        return t

    def get(self, h: str) -> dict | None:
        return self.entries.get(h)

    def record(self, h: str, request: dict, response: dict) -> None:
        with self._lock:
            if h in self.entries:
                return
            self.entries[h] = response
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {"hash": h, "request": request, "response": response},
                        sort_keys=True,
                        ensure_ascii=False,
                    )
                )
                fh.write("\n")


class HttpBackend:
    """OpenAI-compatible HTTP backend (chat/completions + embeddings)."""

    def __init__(self, config: GatewayConfig):
        import requests

        self._requests = requests
        self.config = config
        self.session = requests.Session()

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, endpoint: str, request: dict) -> dict:
        url = self.config.base_url.rstrip("/") + endpoint
        resp = self.session.post(
            url, json=request, headers=self._headers(), timeout=self.config.timeout
        )
        if resp.status_code >= 400:
            raise GatewayError(f"{url} -> HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    def chat(self, request: dict) -> dict:
        return self._post("/chat/completions", request)

    def embed(self, request: dict) -> dict:
        return self._post("/embeddings", request)


@dataclass
class MockChatRule:
    """First regex (searched) that matches the prompt determines the reply."""

    pattern: str
    reply: object  # str, or callable(prompt, match) -> str

    def respond(self, prompt: str):
        m = re.search(self.pattern, prompt, flags=re.DOTALL)
        if m is None:
            return None
        if callable(self.reply):
            return self.reply(prompt, m)
        return self.reply


class MockBackend:
    """Deterministic offline backend: rule-based chat, seeded-hash embeddings."""

    def __init__(self, rules: list[MockChatRule] | None = None, seed: int = 0,
                 embed_dim: int = 64, default_reply: str = "",
                 embed_fn=None):
        self.rules = list(rules or [])
        self.seed = seed
        self.embed_dim = embed_dim
        self.default_reply = default_reply
        self.embed_fn = embed_fn
        self.chat_calls = 0
        self.embed_calls = 0

    def chat(self, request: dict) -> dict:
        self.chat_calls += 1
        prompt = request["messages"][-1]["content"]
        reply = self.default_reply
        for rule in self.rules:
            got = rule.respond(prompt)
            if got is not None:
                reply = got
                break
        return {"choices": [{"message": {"role": "assistant", "content": reply}}]}

    def _vector(self, text: str) -> list[float]:
        if self.embed_fn is not None:
            vec = np.asarray(self.embed_fn(text), dtype=np.float64)
        else:
            digest = hashlib.sha256(f"{self.seed}\x1f{text}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.embed_dim)
        norm = float(np.linalg.norm(vec))
        if norm > 0:
            vec = vec / norm
        return [float(x) for x in vec]

    def embed(self, request: dict) -> dict:
        self.embed_calls += 1
        texts = request["input"]
        return {
            "data": [
                {"index": i, "embedding": self._vector(t)}
                for i, t in enumerate(texts)
            ]
        }


class LlmGateway:
    """Shared handle for all chat and embedding traffic.

    No other module performs network activity; this object is the only
    network capability in the system.
    """

    def __init__(self, config: GatewayConfig, backend=None):
        self.config = config
        if backend is None:
            if config.backend == "mock":
                backend = MockBackend(seed=config.mock_seed,
                                      embed_dim=config.mock_embed_dim)
            else:
                backend = HttpBackend(config)
        self.backend = backend
        self.transcript: Transcript | None = None
        if config.transcript_mode != TRANSCRIPT_OFF:
            if not config.transcript_path:
                raise ValueError("transcript_path required for record/replay")
            self.transcript = Transcript.load(config.transcript_path)
        self._slots = threading.BoundedSemaphore(config.max_in_flight)

    def _call(self, kind: str, request: dict) -> dict:
        h = request_hash(request)
        if self.config.transcript_mode == TRANSCRIPT_REPLAY:
            response = self.transcript.get(h)
            if response is None:
                raise ReplayMissError(h)
            return response
        if self.transcript is not None:
            cached = self.transcript.get(h)
            if cached is not None:
                return cached
        last_exc = None
        for attempt in range(self.config.max_retries + 1):
            try:
                with self._slots:
                    response = getattr(self.backend, kind)(request)
                break
            except ReplayMissError:
                raise
            except Exception as exc:
                last_exc = exc
                if attempt < self.config.max_retries:
                    delay = self.config.retry_backoff * (2 ** attempt)
                    logger.warning("%s attempt %d failed (%s); retrying in %.2fs",
                                   kind, attempt + 1, exc, delay)
                    time.sleep(delay)
        else:
            raise GatewayError(f"{kind} failed after retries: {last_exc}")
        if self.config.transcript_mode == TRANSCRIPT_RECORD:
            self.transcript.record(h, request, response)
        return response

    def chat(self, prompt: str, temperature: float = 0.0, **params) -> str:
        request = {
            "model": self.config.chat_model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        }
        request.update(params)
        response = self._call("chat", request)
        try:
            return response["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed chat response: {exc}")

    def embed(self, texts: list[str], mask_position_mode: bool = False) -> list[np.ndarray]:
        """Embed a batch of texts, order-preserving.

        mask_position_mode asks for the [MASK]-token position vector; a
        provider exposing only pooled sequence embeddings answers with the
        sequence embedding of the rendered string (the mask token appears
        literally in the text), which is the documented degradation.
        """
        if not texts:
            raise ValueError("texts must be non-empty")
        request = {"model": self.config.embed_model, "input": list(texts)}
        if mask_position_mode:
            request["encoding_position"] = "mask"
        response = self._call("embed", request)
        try:
            rows = sorted(response["data"], key=lambda d: d.get("index", 0))
            out = [np.asarray(r["embedding"], dtype=np.float64) for r in rows]
        except (KeyError, TypeError) as exc:
            raise GatewayError(f"malformed embeddings response: {exc}")
        if len(out) != len(texts):
            raise GatewayError("embeddings response count mismatch")
        return out
