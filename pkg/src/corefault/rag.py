"""Retrieval-augmented troubleshooting prompts.

A local directory of .txt/.md documents is chunked on a sliding character
window and indexed with TF-IDF.  Chunks relevant to a fault report are
pasted into a prompt together with the suspicious frame and the frame
before it; the prompt can be dumped (dry run) or sent to any endpoint that
speaks the common chat-completion JSON shape.
"""
from __future__ import annotations

import json
import logging
import math
import os
import sys
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .errors import (
    CompletionTimeout,
    CorpusIndexError,
    PromptError,
    RetrievalError,
    SpecError,
    TransportError,
)
from .ingest import CaptureSummary, canonicalize
from .triage import FaultReport, render_text

log = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 800
DEFAULT_OVERLAP = 200
INDEX_VERSION = 1
DOC_SUFFIXES = (".txt", ".md")

PROMPT_VERSION = "troubleshoot-v1"
SYSTEM_TEXT = (
    "You are a 5G packet core troubleshooting assistant. "
    "You receive a fault report produced from a packet capture, the frame that "
    "preceded the suspicious frame, and excerpts from reference documents. "
    "Explain the most likely cause of the fault and give concrete steps a tester "
    "can take to fix it. Base the answer on the report and the excerpts; cite "
    "each excerpt you rely on by its [source: ...] tag. If the excerpts do not "
    "cover the fault, say so instead of guessing."
)


@dataclass(frozen=True)
class DocChunk:
    doc_id: str
    chunk_index: int
    text: str
    token_count: int


def chunk_text(text: str, chunk_size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_OVERLAP) -> list[str]:
    """Sliding-window chunks advancing ``chunk_size - overlap`` characters.

    A tail no longer than ``chunk_size + overlap`` is folded into the last
    chunk so no chunk is a tiny remainder.
    """
    if chunk_size < 1 or not 0 <= overlap < chunk_size:
        raise SpecError("need chunk_size >= 1 and 0 <= overlap < chunk_size")
    if not text:
        return []
    step = chunk_size - overlap
    out = []
    start = 0
    while True:
        if len(text) - start <= chunk_size + overlap:
            out.append(text[start:])
            return out
        out.append(text[start:start + chunk_size])
        start += step


def reconstruct(chunks: list[str], overlap: int = DEFAULT_OVERLAP) -> str:
    if not chunks:
        return ""
    return chunks[0] + "".join(c[overlap:] for c in chunks[1:])


def _tokens(text: str) -> list[str]:
    return canonicalize(text).split()


@dataclass
class CorpusIndex:
    chunks: list[DocChunk]
    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP
    df: Counter = field(init=False)
    tf: list[Counter] = field(init=False)

    def __post_init__(self):
        if not self.chunks:
            raise CorpusIndexError("index has no chunks")
        self.tf = [Counter(_tokens(c.text)) for c in self.chunks]
        self.df = Counter()
        for counts in self.tf:
            self.df.update(counts.keys())
        n = len(self.chunks)
        self._idf = {tok: math.log((1 + n) / (1 + d)) + 1.0 for tok, d in self.df.items()}
        self._norms = [
            math.sqrt(sum((c * self._idf[t]) ** 2 for t, c in counts.items())) for counts in self.tf
        ]

    def idf(self, token: str) -> float:
        return self._idf[token]

    def to_json(self) -> dict:
        return {
            "version": INDEX_VERSION,
            "chunk_size": self.chunk_size,
            "overlap": self.overlap,
            "chunks": [
                {"doc_id": c.doc_id, "chunk_index": c.chunk_index, "text": c.text, "token_count": c.token_count}
                for c in self.chunks
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CorpusIndex":
        if not isinstance(doc, dict) or doc.get("version") != INDEX_VERSION:
            raise CorpusIndexError("unsupported index file")
        chunks = [DocChunk(c["doc_id"], c["chunk_index"], c["text"], c["token_count"]) for c in doc["chunks"]]
        return cls(chunks, doc["chunk_size"], doc["overlap"])


def build_index(corpus_dir, chunk_size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_OVERLAP) -> CorpusIndex:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise CorpusIndexError(f"{root} is not a directory")
    paths = sorted(
        (p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in DOC_SUFFIXES),
        key=lambda p: p.relative_to(root).as_posix(),
    )
    chunks = []
    for path in paths:
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            log.warning("skipping unreadable document %s: %s", path, exc)
            continue
        doc_id = path.relative_to(root).as_posix()
        for i, piece in enumerate(chunk_text(text, chunk_size, overlap)):
            chunks.append(DocChunk(doc_id, i, piece, len(_tokens(piece))))
    if not chunks:
        raise CorpusIndexError(f"no readable .txt/.md content under {root}")
    return CorpusIndex(chunks, chunk_size, overlap)


def save_index(index: CorpusIndex, path) -> None:
    Path(path).write_text(json.dumps(index.to_json(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def load_index(path) -> CorpusIndex:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusIndexError(f"{path}: {exc}") from exc
    return CorpusIndex.from_json(doc)


@dataclass(frozen=True)
class Retrieved:
    chunk: DocChunk
    score: float


def retrieve(index: CorpusIndex, query: str, k: int = 4) -> list[Retrieved]:
    """Top ``k`` chunks by TF-IDF cosine; ties go to (doc_id, chunk_index)."""
    if k < 0:
        raise RetrievalError("k must be >= 0")
    q = Counter(_tokens(query))
    if not q:
        raise RetrievalError("query is empty after canonicalization")
    qvec = {t: c * index.idf(t) for t, c in q.items() if t in index.df}
    qnorm = math.sqrt(sum(v * v for v in qvec.values()))
    scored = []
    for i, chunk in enumerate(index.chunks):
        score = 0.0
        if qnorm > 0 and index._norms[i] > 0:
            counts = index.tf[i]
            dot = sum(v * counts[t] * index.idf(t) for t, v in qvec.items() if t in counts)
            score = dot / (qnorm * index._norms[i])
        scored.append(Retrieved(chunk, score))
    scored.sort(key=lambda r: (-r.score, r.chunk.doc_id, r.chunk.chunk_index))
    return scored[:k]


# -- prompt ------------------------------------------------------------------

@dataclass(frozen=True)
class PromptPackage:
    system_text: str
    user_text: str
    retrieved: tuple[tuple[str, int, float], ...] = ()
    prompt_version: str = PROMPT_VERSION

    def to_dict(self) -> dict:
        return {
            "prompt_version": self.prompt_version,
            "system_text": self.system_text,
            "user_text": self.user_text,
            "retrieved": [{"doc_id": d, "chunk_index": i, "score": s} for d, i, s in self.retrieved],
        }


def _previous_frames(capture: CaptureSummary, frame_no: int, n: int) -> list:
    pos = next((i for i, f in enumerate(capture.frames) if f.no == frame_no), None)
    if pos is None:
        return []
    return capture.frames[max(0, pos - n):pos]


def build_prompt(
    report: FaultReport,
    capture: CaptureSummary,
    index: CorpusIndex | None = None,
    k: int = 4,
    context_frames: int = 1,
) -> PromptPackage:
    if report.verdict != "faulty" or not report.suspicious:
        raise PromptError("nothing to troubleshoot")
    primary = report.suspicious[0]
    previous = _previous_frames(capture, primary.frame_no, context_frames)

    query_parts = [primary.raw_info] + [f.info for f in previous]
    if report.expected_transition is not None:
        query_parts += [m.label for m in report.expected_transition.to]

    hits = []
    if index is not None and k > 0:
        hits = retrieve(index, " ".join(query_parts), k)

    lines = ["Fault summary:", render_text(report).rstrip("\n"), ""]
    if previous:
        label = "Previous frame" if len(previous) == 1 else "Previous frames"
        lines.append(f"{label}:")
        lines += [f"{f.no} {f.protocol} {f.info}" for f in previous]
    else:
        lines.append("Previous frame: none (first frame)")
    lines.append("")
    if hits:
        lines.append("Reference excerpts:")
        for h in hits:
            lines.append(f"[source: {h.chunk.doc_id}#{h.chunk.chunk_index}]")
            lines.append(h.chunk.text)
            lines.append("")
    else:
        lines += ["Reference excerpts: none", ""]
    lines.append("What is the most likely cause of the suspicious message, and how should it be fixed?")
    return PromptPackage(
        SYSTEM_TEXT,
        "\n".join(lines) + "\n",
        tuple((h.chunk.doc_id, h.chunk.chunk_index, h.score) for h in hits),
    )


# -- endpoint -----------------------------------------------------------------

@dataclass
class EndpointConfig:
    url: str
    model: str = "mistral-7b-instruct"
    api_key_env: str = "COREFAULT_API_KEY"
    timeout: float = 60.0
    retries: int = 2
    backoff: float = 0.5


def _excerpt(text: str, limit: int = 200) -> str:
    return text if len(text) <= limit else text[:limit] + "..."


def complete(
    prompt: PromptPackage,
    config: EndpointConfig | None = None,
    dry_run: bool = False,
    out=None,
    session=None,
) -> str:
    """Send ``prompt`` to the endpoint, or write its user text when dry-running.

    Server errors (5xx, 429), connection failures and timeouts are retried
    up to ``config.retries`` times with exponential backoff.  Other 4xx
    responses and malformed bodies fail at once.
    """
    if dry_run:
        (out or sys.stdout).write(prompt.user_text)
        return prompt.user_text
    if config is None or not config.url:
        raise SpecError("no endpoint configured; use dry-run")

    headers = {"Content-Type": "application/json"}
    key = os.environ.get(config.api_key_env, "") if config.api_key_env else ""
    if key:
        headers["Authorization"] = f"Bearer {key}"
    body = {
        "model": config.model,
        "messages": [
            {"role": "system", "content": prompt.system_text},
            {"role": "user", "content": prompt.user_text},
        ],
    }
    http = session or requests
    last: TransportError | None = None
    for attempt in range(config.retries + 1):
        if attempt:
            time.sleep(config.backoff * 2 ** (attempt - 1))
        try:
            resp = http.post(config.url, json=body, headers=headers, timeout=config.timeout)
        except requests.Timeout as exc:
            last = CompletionTimeout(f"no response within {config.timeout}s: {exc}")
            continue
        except requests.RequestException as exc:
            last = TransportError(f"request failed: {exc}")
            continue
        if resp.status_code >= 500 or resp.status_code == 429:
            last = TransportError(f"endpoint returned {resp.status_code}", resp.status_code, _excerpt(resp.text))
            continue
        if not 200 <= resp.status_code < 300:
            raise TransportError(f"endpoint returned {resp.status_code}", resp.status_code, _excerpt(resp.text))
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion response: {exc!r}", resp.status_code,
                                 _excerpt(resp.text)) from exc
        if not isinstance(content, str):
            raise TransportError("completion content is not text", resp.status_code, _excerpt(resp.text))
        return content
    log.warning("giving up after %d attempt(s)", config.retries + 1)
    raise last
