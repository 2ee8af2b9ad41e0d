import io
import json
import logging
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corefault import rag, synth, triage
from corefault.errors import (
    CompletionTimeout,
    CorpusIndexError,
    PromptError,
    RetrievalError,
    SpecError,
    TransportError,
)
from corefault.ingest import CaptureSummary, FrameRecord


def write_docs(root, docs: dict):
    for name, text in docs.items():
        p = root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
    return root


# -- chunking -----------------------------------------------------------------

def test_short_document_single_chunk():
    assert rag.chunk_text("x" * 100) == ["x" * 100]


def test_window_offsets():
    text = "".join(chr(97 + i % 26) for i in range(1500))
    chunks = rag.chunk_text(text)
    assert chunks == [text[0:800], text[600:]] and len(chunks[1]) == 900


def test_tail_folding():
    # 2100 chars: 0..800, 600..1400, then 1200.. has 900 left and is folded in
    chunks = rag.chunk_text("y" * 2100)
    assert [len(c) for c in chunks] == [800, 800, 900]


def test_bad_chunk_parameters():
    with pytest.raises(SpecError):
        rag.chunk_text("abc", 100, 100)


@given(st.text(min_size=1, max_size=3000), st.integers(2, 300), st.data())
@settings(max_examples=150)
def test_chunks_reconstruct_document(text, size, data):
    overlap = data.draw(st.integers(0, size - 1))
    chunks = rag.chunk_text(text, size, overlap)
    assert rag.reconstruct(chunks, overlap) == text
    assert all(1 <= len(c) <= size + overlap for c in chunks)


# -- index and retrieval ------------------------------------------------------

def test_index_order_and_df(tmp_path):
    write_docs(tmp_path, {"b.md": "reject congestion", "a.txt": "reject congestion", "skip.pdf": "nope",
                          "sub/c.md": "accept"})
    index = rag.build_index(tmp_path)
    assert [c.doc_id for c in index.chunks] == ["a.txt", "b.md", "sub/c.md"]
    assert index.df["reject"] == 2 and index.df["accept"] == 1
    assert index.chunks[0].token_count == 2


def test_df_counts_chunks(tmp_path):
    write_docs(tmp_path, {"long.md": "alpha " * 200})
    index = rag.build_index(tmp_path)
    assert len(index.chunks) == 2 and index.df["alpha"] == 2


def test_unreadable_file_skipped(tmp_path, caplog):
    write_docs(tmp_path, {"good.md": "registration reject"})
    (tmp_path / "bad.md").write_bytes(b"\xff\xfe\xfa broken")
    with caplog.at_level(logging.WARNING):
        index = rag.build_index(tmp_path)
    assert [c.doc_id for c in index.chunks] == ["good.md"]
    assert "bad.md" in caplog.text


def test_empty_corpus(tmp_path):
    with pytest.raises(CorpusIndexError):
        rag.build_index(tmp_path)
    with pytest.raises(CorpusIndexError):
        rag.build_index(tmp_path / "missing")


def test_retrieve_ranks_matching_chunk_first(tmp_path):
    write_docs(tmp_path, {"a.md": "registration accept flow", "b.md": "registration reject congestion cause 22",
                          "c.md": "pdu session establishment"})
    hits = rag.retrieve(rag.build_index(tmp_path), "registration reject congestion")
    assert hits[0].chunk.doc_id == "b.md"
    assert [h.score for h in hits] == sorted((h.score for h in hits), reverse=True)


def test_tf_idf_oracle_with_repeated_terms(tmp_path):
    write_docs(tmp_path, {"a.md": "reject reject accept", "b.md": "accept"})
    hits = {h.chunk.doc_id: h.score for h in rag.retrieve(rag.build_index(tmp_path), "reject")}
    # N=2; idf(reject)=ln(3/2)+1, idf(accept)=ln(3/3)+1=1
    r = math.log(1.5) + 1
    assert hits["a.md"] == pytest.approx(2 * r / math.sqrt((2 * r) ** 2 + 1), abs=1e-12)
    assert hits["b.md"] == 0.0


def test_no_shared_tokens_gives_zero_scores_in_tie_order(tmp_path):
    write_docs(tmp_path, {"b.md": "beta", "a.md": "alpha", "c.md": "gamma"})
    hits = rag.retrieve(rag.build_index(tmp_path), "unrelated words", k=10)
    assert [(h.chunk.doc_id, h.score) for h in hits] == [("a.md", 0.0), ("b.md", 0.0), ("c.md", 0.0)]


def test_retrieve_errors_and_k_zero(tmp_path):
    index = rag.build_index(write_docs(tmp_path, {"a.md": "alpha"}))
    with pytest.raises(RetrievalError):
        rag.retrieve(index, " ()[] ")
    assert rag.retrieve(index, "alpha", k=0) == []


def test_index_json_round_trip(tmp_path):
    index = rag.build_index(write_docs(tmp_path / "d", {"a.md": "alpha beta " * 100, "b.txt": "gamma"}))
    rag.save_index(index, tmp_path / "i.json")
    again = rag.load_index(tmp_path / "i.json")
    assert again.chunks == index.chunks and again.df == index.df
    assert rag.retrieve(again, "alpha gamma") == rag.retrieve(index, "alpha gamma")


# -- prompt -------------------------------------------------------------------

@pytest.fixture(scope="module")
def congestion_report(trained):
    c = synth.congestion_scenario()
    return c, triage.analyze(trained["graph"], trained["bundle"], c)


@pytest.fixture
def toy_index(tmp_path):
    return rag.build_index(write_docs(tmp_path, {
        "congestion.md": "Registration reject with cause Congestion: check the PCF, 504 Gateway Time-out.",
        "auth.md": "Authentication reject: check subscriber keys in the UDM.",
        "pdu.md": "PDU session establishment reject: unknown DNN.",
    }))


def test_prompt_contents(congestion_report, toy_index):
    capture, report = congestion_report
    prompt = rag.build_prompt(report, capture, toy_index, k=2)
    assert prompt.system_text == rag.SYSTEM_TEXT and prompt.prompt_version == rag.PROMPT_VERSION
    text = prompt.user_text
    previous = capture.frames[21]
    assert "Registration reject (Congestion)" in text
    assert f"{previous.no} {previous.protocol} {previous.info}" in text
    assert prompt.retrieved[0][0] == "congestion.md" and len(prompt.retrieved) == 2
    # section order: summary, previous frame, excerpts
    assert text.index("Fault summary:") < text.index("Previous frame:") < text.index("[source: congestion.md#0]")
    for doc_id, idx, _ in prompt.retrieved:
        chunk = next(c for c in toy_index.chunks if (c.doc_id, c.chunk_index) == (doc_id, idx))
        assert f"[source: {doc_id}#{idx}]\n{chunk.text}" in text
    summary = text.split("Previous frame:")[0]
    assert summary.count(report.suspicious[0].raw_info) == 1
    scores = [s for _, _, s in prompt.retrieved]
    assert scores == sorted(scores, reverse=True)


def test_prompt_first_frame_and_k_zero(toy_index):
    capture = CaptureSummary("c", "fail", [FrameRecord(1, 0.0, "a", "b", "NAS-5GS", 10, "Registration reject")])
    report = triage.FaultReport("c", "faulty", "deviation", [triage.Suspect(1, "Registration reject", "golden_flow")])
    prompt = rag.build_prompt(report, capture, toy_index, k=0)
    assert "Previous frame: none (first frame)" in prompt.user_text
    assert prompt.retrieved == () and "[source:" not in prompt.user_text


def test_prompt_context_frames(congestion_report):
    capture, report = congestion_report
    prompt = rag.build_prompt(report, capture, None, context_frames=3)
    assert "Previous frames:" in prompt.user_text
    for f in capture.frames[19:22]:
        assert f"{f.no} {f.protocol} {f.info}" in prompt.user_text


def test_clean_report_has_nothing_to_troubleshoot():
    report = triage.FaultReport("c", "clean", "conforms")
    with pytest.raises(PromptError, match="nothing to troubleshoot"):
        rag.build_prompt(report, CaptureSummary("c", "success", []))


# -- completion ---------------------------------------------------------------

class Stub:
    """Local chat-completion server replaying a queue of (status, body) replies."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                stub.requests.append((dict(self.headers), json.loads(body)))
                status, payload = stub.replies.pop(0) if len(stub.replies) > 1 else stub.replies[0]
                data = payload.encode() if isinstance(payload, str) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *a):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_port}/v1/chat/completions"
        self.thread = threading.Thread(target=self.server.serve_forever, args=(0.05,), daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def ok_reply(text):
    return 200, {"choices": [{"message": {"role": "assistant", "content": text}}]}


PROMPT = rag.PromptPackage("system words", "user words")


def cfg(url, **kw):
    return rag.EndpointConfig(url, model="test-model", backoff=0.0, **kw)


def test_complete_against_stub(monkeypatch):
    monkeypatch.setenv("COREFAULT_API_KEY", "sekret")
    with Stub([ok_reply("restart the PCF")]) as stub:
        assert rag.complete(PROMPT, cfg(stub.url)) == "restart the PCF"
    headers, body = stub.requests[0]
    assert headers["Authorization"] == "Bearer sekret"
    assert body == {"model": "test-model", "messages": [{"role": "system", "content": "system words"},
                                                        {"role": "user", "content": "user words"}]}


def test_no_auth_header_without_key(monkeypatch):
    monkeypatch.delenv("COREFAULT_API_KEY", raising=False)
    with Stub([ok_reply("x")]) as stub:
        rag.complete(PROMPT, cfg(stub.url))
    assert "Authorization" not in stub.requests[0][0]


def test_three_server_errors_raise_after_three_attempts():
    with Stub([(500, "boom")]) as stub:
        with pytest.raises(TransportError) as exc:
            rag.complete(PROMPT, cfg(stub.url))
    assert len(stub.requests) == 3
    assert exc.value.status == 500 and exc.value.body == "boom"


def test_retry_then_success():
    with Stub([(503, "busy"), ok_reply("fine")]) as stub:
        assert rag.complete(PROMPT, cfg(stub.url)) == "fine"
    assert len(stub.requests) == 2


def test_client_error_not_retried():
    with Stub([(401, "no key")]) as stub:
        with pytest.raises(TransportError) as exc:
            rag.complete(PROMPT, cfg(stub.url))
    assert len(stub.requests) == 1 and exc.value.status == 401


def test_malformed_response():
    with Stub([(200, {"choices": []})]) as stub:
        with pytest.raises(TransportError, match="malformed"):
            rag.complete(PROMPT, cfg(stub.url))


def test_connection_refused_is_transport_error():
    with Stub([ok_reply("x")]) as stub:
        url = stub.url
    with pytest.raises(TransportError):
        rag.complete(PROMPT, cfg(url, retries=0))


def test_timeout(monkeypatch):
    import requests

    class Slow:
        calls = 0

        def post(self, *a, **kw):
            Slow.calls += 1
            raise requests.Timeout("read timed out")

    with pytest.raises(CompletionTimeout):
        rag.complete(PROMPT, cfg("http://unused", retries=1), session=Slow())
    assert Slow.calls == 2


def test_no_endpoint_without_dry_run():
    with pytest.raises(SpecError):
        rag.complete(PROMPT, None)


def test_dry_run_opens_no_sockets(no_network, congestion_report, toy_index):
    capture, report = congestion_report
    prompt = rag.build_prompt(report, capture, toy_index)
    out = io.StringIO()
    assert rag.complete(prompt, cfg("http://example.invalid"), dry_run=True, out=out) == prompt.user_text
    assert out.getvalue() == prompt.user_text


def test_socket_guard_is_live(no_network):
    import socket

    with pytest.raises(AssertionError, match="network"):
        socket.create_connection(("127.0.0.1", 9))
