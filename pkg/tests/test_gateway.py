import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discuss_rag.errors import BackendRefusal, DimensionMismatch, FixtureExhausted, TransportError
from discuss_rag.gateway import (
    ChatCompletion,
    ChatRequest,
    FixtureEntry,
    HashingEmbedder,
    Message,
    OpenAICompatBackend,
    ScriptedBackend,
    load_fixture,
    request_fingerprint,
    save_fixture,
)


def req(user="hello", system="sys"):
    return ChatRequest.simple(system, user)


class TestChatRequest:
    def test_first_message_must_be_system(self):
        with pytest.raises(ValueError):
            ChatRequest((Message("user", "hi"),))

    def test_empty_messages_rejected(self):
        with pytest.raises(ValueError):
            ChatRequest(())

    @pytest.mark.parametrize("temp", [-0.1, float("nan"), float("inf")])
    def test_bad_temperature(self, temp):
        with pytest.raises(ValueError):
            ChatRequest.simple("s", "u", temperature=temp)

    def test_defaults(self):
        r = req()
        assert r.temperature == 0.0
        assert r.max_tokens > 0

    def test_stop_completion_needs_content(self):
        with pytest.raises(ValueError):
            ChatCompletion("", "stop")
        assert ChatCompletion("", "length").content == ""


class TestFingerprint:
    def test_whitespace_normalized(self):
        a = ChatRequest.simple("sys  prompt", "line one\n\n line two")
        b = ChatRequest.simple("sys prompt", "line one line two")
        assert request_fingerprint(a) == request_fingerprint(b)

    def test_content_and_roles_matter(self):
        base = request_fingerprint(req("x"))
        assert request_fingerprint(req("y")) != base
        swapped = ChatRequest((Message("system", "sys"), Message("assistant", "x")))
        assert request_fingerprint(swapped) != base


class TestScriptedBackend:
    def test_fingerprint_replay(self):
        r = req("who is on the team?")
        fp = request_fingerprint(r)
        backend = ScriptedBackend([FixtureEntry("ROLE: cardiologist", fingerprint=fp)])
        assert backend.complete(r).content == "ROLE: cardiologist"

    def test_unmatched_fingerprint_is_exhausted(self):
        backend = ScriptedBackend([FixtureEntry("x", fingerprint="0" * 16)])
        with pytest.raises(FixtureExhausted):
            backend.complete(req())

    def test_empty_fixture_exhausted(self):
        with pytest.raises(FixtureExhausted):
            ScriptedBackend().complete(req())

    def test_entries_consumed_in_order(self):
        backend = ScriptedBackend([FixtureEntry("first"), FixtureEntry("second")])
        assert [backend.complete(req()).content for _ in range(2)] == ["first", "second"]
        assert backend.remaining == 0
        with pytest.raises(FixtureExhausted):
            backend.complete(req())

    def test_match_substring(self):
        backend = ScriptedBackend([FixtureEntry("for B", match="bravo"), FixtureEntry("for A", match="alpha")])
        assert backend.complete(req("alpha question")).content == "for A"
        assert backend.complete(req("bravo question")).content == "for B"

    def test_error_entry_raises_transport_error(self):
        backend = ScriptedBackend([FixtureEntry("boom", finish_reason="error")])
        with pytest.raises(TransportError, match="boom"):
            backend.complete(req())

    def test_responder_fallback(self):
        backend = ScriptedBackend([FixtureEntry("fixture")], responder=lambda r: "responder")
        assert backend.complete(req()).content == "fixture"
        assert backend.complete(req()).content == "responder"
        assert not backend.thread_safe
        assert ScriptedBackend(responder=lambda r: "x").thread_safe

    def test_fixture_file_round_trip(self, tmp_path):
        entries = [FixtureEntry("a"), FixtureEntry("b", fingerprint="abc", finish_reason="length", match="m")]
        path = tmp_path / "fx.jsonl"
        save_fixture(entries, path)
        assert load_fixture(path) == entries

    def test_bad_fixture_line(self, tmp_path):
        path = tmp_path / "fx.jsonl"
        path.write_text('{"content": "ok"}\nnot json\n')
        with pytest.raises(ValueError, match=":2:"):
            load_fixture(path)

    def test_repeat_run_is_identical(self):
        def run():
            b = ScriptedBackend([FixtureEntry("one"), FixtureEntry("two")])
            out = [b.complete(req(str(i))) for i in range(2)]
            return out, [v.tobytes() for v in b.embed(["aspirin", "warfarin"])]
        assert run() == run()


class TestEmbedding:
    def test_identical_texts_identical_vectors(self):
        a, b = ScriptedBackend().embed(["a", "a"])
        assert a.tobytes() == b.tobytes()

    def test_seeded_determinism_across_calls_and_instances(self):
        v1 = ScriptedBackend(seed=42).embed(["aspirin"])[0]
        v2 = ScriptedBackend(seed=42).embed(["aspirin"])[0]
        assert v1.tobytes() == v2.tobytes()
        assert ScriptedBackend(seed=7).embed(["aspirin"])[0].tobytes() != v1.tobytes()

    def test_count_and_dim(self):
        vecs = ScriptedBackend(dim=64).embed(["one", "two", "three"])
        assert len(vecs) == 3
        assert all(v.shape == (64,) for v in vecs)

    def test_unit_norm(self):
        v = HashingEmbedder(32).embed_one("renal tubular acidosis")
        assert abs(float(np.linalg.norm(v)) - 1.0) < 1e-6

    def test_lexical_overlap_raises_similarity(self):
        e = HashingEmbedder(64)
        a, b, c = e.embed(["oxygen extraction myocardium", "myocardium oxygen extraction high", "mosquito nets"])
        assert float(a @ b) > float(a @ c)

    @pytest.mark.parametrize("texts", [[], ["ok", "   "]])
    def test_invalid_inputs(self, texts):
        with pytest.raises(ValueError):
            ScriptedBackend().embed(texts)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.text(min_size=1).filter(lambda s: s.strip()), min_size=1, max_size=5))
    def test_count_dims_finite(self, texts):
        vecs = ScriptedBackend(dim=16).embed(texts)
        assert len(vecs) == len(texts)
        assert {v.shape for v in vecs} == {(16,)}
        assert all(np.all(np.isfinite(v)) for v in vecs)


# --------------------------------------------------------------------------
# live backend against a local stub server

CANNED = {
    "choices": [{"message": {"role": "assistant", "content": "canned reply"}, "finish_reason": "stop"}],
    "usage": {"prompt_tokens": 5, "completion_tokens": 2},
}


class StubServer:
    def __init__(self, script):
        self.script = list(script)  # (status, body) per request; last one repeats
        self.log = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                stub.log.append((self.path, self.headers.get("Authorization"),
                                 json.loads(self.rfile.read(length))))
                status, body = stub.script.pop(0) if len(stub.script) > 1 else stub.script[0]
                raw = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.httpd.server_address[1]}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def test_live_retries_two_503s_then_succeeds():
    script = [(503, {"error": "busy"}), (503, {"error": "busy"}), (200, CANNED)]
    with StubServer(script) as stub:
        backend = OpenAICompatBackend(stub.url, api_key="secret", max_attempts=3, backoff=0.01)
        out = backend.complete(req("ping"))
    assert out.content == "canned reply"
    assert out.usage == (5, 2)
    assert len(stub.log) == 3
    assert backend.attempts == 3
    path, auth, body = stub.log[-1]
    assert path == "/v1/chat/completions"
    assert auth == "Bearer secret"
    assert body["temperature"] == 0.0
    assert body["messages"][0] == {"role": "system", "content": "sys"}


def test_live_gives_up_after_limit():
    with StubServer([(503, {"error": "busy"})]) as stub:
        backend = OpenAICompatBackend(stub.url, api_key="k", max_attempts=3, backoff=0.0)
        with pytest.raises(TransportError):
            backend.complete(req())
    assert len(stub.log) == 3


def test_live_4xx_is_not_retried():
    with StubServer([(400, {"error": "bad request"})]) as stub:
        backend = OpenAICompatBackend(stub.url, api_key="k", backoff=0.0)
        with pytest.raises(BackendRefusal):
            backend.complete(req())
    assert len(stub.log) == 1


def test_live_empty_stop_completion_refused():
    body = {"choices": [{"message": {"content": ""}, "finish_reason": "stop"}]}
    with StubServer([(200, body)]) as stub:
        with pytest.raises(BackendRefusal):
            OpenAICompatBackend(stub.url, api_key="k").complete(req())


def test_live_connection_refused_is_transport_error():
    backend = OpenAICompatBackend("http://127.0.0.1:9/v1", api_key="k", max_attempts=2, backoff=0.0)
    with pytest.raises(TransportError):
        backend.complete(req())
    assert backend.attempts == 2


def test_live_api_key_from_env(monkeypatch):
    monkeypatch.setenv("DISCUSS_RAG_API_KEY", "from-env")
    with StubServer([(200, CANNED)]) as stub:
        OpenAICompatBackend(stub.url).complete(req())
    assert stub.log[0][1] == "Bearer from-env"


def test_live_embeddings():
    body = {"data": [{"index": 1, "embedding": [0.0, 1.0, 0.0]}, {"index": 0, "embedding": [1.0, 0.0, 0.0]}]}
    with StubServer([(200, body)]) as stub:
        vecs = OpenAICompatBackend(stub.url, api_key="k").embed(["a", "b"])
    assert stub.log[0][0] == "/v1/embeddings"
    assert stub.log[0][2]["input"] == ["a", "b"]
    assert [v.tolist() for v in vecs] == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]


def test_live_embeddings_inconsistent_dims():
    body = {"data": [{"index": 0, "embedding": [1.0, 0.0]}, {"index": 1, "embedding": [1.0]}]}
    with StubServer([(200, body)]) as stub:
        with pytest.raises(DimensionMismatch):
            OpenAICompatBackend(stub.url, api_key="k").embed(["a", "b"])
