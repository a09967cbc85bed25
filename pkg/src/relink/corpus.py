"""Corpus ingestion: documents, sentence segmentation, and dictionary-based
entity mention annotation.

All identifiers are content-derived strings so that stores serialize
deterministically and re-ingestion is byte-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .errors import CorpusFormatError, DuplicateDocumentError

SCHEMA_VERSION = 1

# Tokens that end with a period but do not terminate a sentence.
_ABBREVIATIONS = {
    "mr", "mrs", "ms", "dr", "prof", "st", "jr", "sr", "vs", "no",
    "etc", "e.g", "i.e", "fig", "al", "inc", "ltd", "co", "dept",
    "approx", "vol", "pp", "ca",
}

_TERMINATORS = ".!?"
_CLOSERS = "\"')]»”’"


@dataclass(frozen=True)
class EntityMention:
    entity_id: str
    surface: str
    start: int
    end: int


@dataclass(frozen=True)
class Sentence:
    sentence_id: str
    text: str
    mentions: tuple[EntityMention, ...] = ()

    def entity_ids(self) -> set[str]:
        return {m.entity_id for m in self.mentions}


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    sentence_ids: tuple[str, ...]


@dataclass(frozen=True)
class CatalogEntry:
    entity_id: str
    name: str
    aliases: tuple[str, ...] = ()


class EntityCatalog:
    """Canonical entity names plus aliases, matched case-insensitively."""

    def __init__(self, entries: list[CatalogEntry]):
        self.entries = list(entries)
        self.by_id = {e.entity_id: e for e in self.entries}
        # surface form (lowercased) -> entity_id; canonical names win over
        # aliases when two entities claim the same surface.
        self._surface_to_id: dict[str, str] = {}
        for entry in self.entries:
            for alias in entry.aliases:
                self._surface_to_id.setdefault(alias.lower(), entry.entity_id)
        for entry in self.entries:
            self._surface_to_id[entry.name.lower()] = entry.entity_id

    def __len__(self):
        return len(self.entries)

    def __contains__(self, entity_id):
        return entity_id in self.by_id

    def name_of(self, entity_id: str) -> str:
        return self.by_id[entity_id].name

    def surfaces(self) -> dict[str, str]:
        return dict(self._surface_to_id)

    def resolve_surface(self, surface: str) -> str | None:
        return self._surface_to_id.get(surface.strip().lower())

    @classmethod
    def from_jsonl(cls, path) -> "EntityCatalog":
        entries = []
        seen = set()
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusFormatError(path, line_no, f"bad JSON: {exc}")
                try:
                    entry = CatalogEntry(
                        entity_id=obj["entity_id"],
                        name=obj["name"],
                        aliases=tuple(obj.get("aliases", ())),
                    )
                except KeyError as exc:
                    raise CorpusFormatError(path, line_no, f"missing field {exc}")
                if entry.entity_id in seen:
                    raise CorpusFormatError(
                        path, line_no, f"duplicate entity_id {entry.entity_id!r}"
                    )
                seen.add(entry.entity_id)
                entries.append(entry)
        return cls(entries)


class CorpusStore:
    """Immutable indexed view of documents, sentences and mentions."""

    def __init__(self, documents: list[Document], sentences: dict[str, Sentence]):
        self.documents = list(documents)
        self.sentences = dict(sentences)

    def sentence(self, sentence_id: str) -> Sentence:
        return self.sentences[sentence_id]

    def iter_sentences(self):
        for doc in self.documents:
            for sid in doc.sentence_ids:
                yield self.sentences[sid]

    def sentences_with_entity(self, entity_id: str) -> list[Sentence]:
        return [s for s in self.iter_sentences() if entity_id in s.entity_ids()]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "documents": [
                {
                    "doc_id": d.doc_id,
                    "title": d.title,
                    "sentences": [
                        {
                            "sentence_id": sid,
                            "text": self.sentences[sid].text,
                            "mentions": [
                                {
                                    "entity_id": m.entity_id,
                                    "surface": m.surface,
                                    "start": m.start,
                                    "end": m.end,
                                }
                                for m in self.sentences[sid].mentions
                            ],
                        }
                        for sid in d.sentence_ids
                    ],
                }
                for d in self.documents
            ],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, obj: dict) -> "CorpusStore":
        documents = []
        sentences = {}
        for d in obj["documents"]:
            sids = []
            for s in d["sentences"]:
                mentions = tuple(
                    EntityMention(m["entity_id"], m["surface"], m["start"], m["end"])
                    for m in s["mentions"]
                )
                sentences[s["sentence_id"]] = Sentence(
                    s["sentence_id"], s["text"], mentions
                )
                sids.append(s["sentence_id"])
            documents.append(Document(d["doc_id"], d["title"], tuple(sids)))
        return cls(documents, sentences)

    @classmethod
    def load(cls, path) -> "CorpusStore":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def segment_sentences(text: str) -> list[tuple[int, int]]:
    """Split text into sentence spans on terminal punctuation.

    Spans are trimmed of surrounding whitespace, non-overlapping and
    ordered; an abbreviation whitelist suppresses false splits after
    e.g. "Dr." or single-letter initials.
    """
    spans: list[tuple[int, int]] = []
    n = len(text)
    start = 0
    i = 0
    while i < n:
        ch = text[i]
        if ch in _TERMINATORS:
            # swallow runs like "?!" or "..." and trailing quotes/brackets
            j = i + 1
            while j < n and text[j] in _TERMINATORS:
                j = j + 1
            while j < n and text[j] in _CLOSERS:
                j = j + 1
            if ch == "." and not _is_boundary_period(text, i):
                i += 1
                continue
            if j >= n or text[j].isspace():
                spans.append((start, j))
                # skip whitespace to the next sentence start
                while j < n and text[j].isspace():
                    j += 1
                start = j
                i = j
                continue
        i += 1
    if start < n:
        spans.append((start, n))
    return [_trim(text, s, e) for s, e in spans if text[s:e].strip()]


def _is_boundary_period(text: str, i: int) -> bool:
    # word immediately before the period
    k = i
    while k > 0 and (text[k - 1].isalnum() or text[k - 1] in ".'"):
        k -= 1
    word = text[k:i].lower().rstrip(".")
    if word in _ABBREVIATIONS:
        return False
    if len(word) == 1 and word.isalpha():
        # single-letter initial such as "J. S. Bach"
        return False
    return True


def _trim(text: str, start: int, end: int) -> tuple[int, int]:
    while start < end and text[start].isspace():
        start += 1
    while end > start and text[end - 1].isspace():
        end -= 1
    return (start, end)


def ingest_corpus(path, fmt: str = "jsonl") -> CorpusStore:
    """Parse a JSON-lines corpus file into a CorpusStore.

    Sentence ids are "{doc_id}#{ordinal}"; re-ingesting the same file
    yields an identical store.
    """
    if fmt != "jsonl":
        raise ValueError(f"unsupported corpus format: {fmt!r}")
    documents = []
    sentences: dict[str, Sentence] = {}
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(path, line_no, f"bad JSON: {exc}")
            try:
                doc_id = obj["doc_id"]
                title = obj["title"]
                text = obj["text"]
            except KeyError as exc:
                raise CorpusFormatError(path, line_no, f"missing field {exc}")
            if doc_id in seen_ids:
                raise DuplicateDocumentError(f"duplicate doc_id {doc_id!r}")
            seen_ids.add(doc_id)
            text = _normalize_whitespace_preserving(text)
            sids = []
            for ordinal, (s, e) in enumerate(segment_sentences(text)):
                sid = f"{doc_id}#{ordinal}"
                sentences[sid] = Sentence(sid, text[s:e])
                sids.append(sid)
            documents.append(Document(doc_id, title, tuple(sids)))
    return CorpusStore(documents, sentences)


def _normalize_whitespace_preserving(text: str) -> str:
    # normalize line endings only; character offsets inside sentences must
    # stay aligned with the stored sentence text
    return text.replace("\r\n", "\n").replace("\r", "\n")


def find_mentions(text: str, catalog: EntityCatalog) -> tuple[EntityMention, ...]:
    """All maximal case-insensitive whole-token catalog matches in text.

    Overlaps are resolved longest-match-first, ties by earliest start.
    """
    lowered = text.lower()
    candidates: list[tuple[int, int, str]] = []
    for surface, entity_id in catalog.surfaces().items():
        start = 0
        while True:
            idx = lowered.find(surface, start)
            if idx < 0:
                break
            end = idx + len(surface)
            if _whole_token(text, idx, end):
                candidates.append((idx, end, entity_id))
            start = idx + 1
    candidates.sort(key=lambda c: (-(c[1] - c[0]), c[0]))
    taken: list[tuple[int, int]] = []
    accepted = []
    for s, e, entity_id in candidates:
        if any(s < te and ts < e for ts, te in taken):
            continue
        taken.append((s, e))
        accepted.append(EntityMention(entity_id, text[s:e], s, e))
    accepted.sort(key=lambda m: m.start)
    return tuple(accepted)


def _whole_token(text: str, start: int, end: int) -> bool:
    before = text[start - 1] if start > 0 else " "
    after = text[end] if end < len(text) else " "
    return not before.isalnum() and not after.isalnum()


def annotate_mentions(store: CorpusStore, catalog: EntityCatalog) -> CorpusStore:
    """Return a copy of the store with mentions attached to every sentence."""
    sentences = {
        sid: replace(sent, mentions=find_mentions(sent.text, catalog))
        for sid, sent in store.sentences.items()
    }
    return CorpusStore(store.documents, sentences)
