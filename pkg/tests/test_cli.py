import hashlib
import json
from pathlib import Path

import pytest

from discuss_rag.cli import main
from discuss_rag.gateway import FixtureEntry, save_fixture
from discuss_rag.pipeline import read_traces
from discuss_rag.query import load_dataset

from conftest import EXAMPLE_ROLES, discuss_rag_entries, make_docs

DATA = Path(__file__).parent / "data"


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.jsonl"
    with open(path, "w") as fh:
        for d in make_docs(3):
            fh.write(json.dumps({"doc_id": d.doc_id, "title": d.title, "body": d.body}) + "\n")
    return path


@pytest.fixture
def index_file(tmp_path, corpus):
    out = tmp_path / "idx.drix"
    assert main(["index", str(corpus), "--out", str(out), "--chunk-size", "200", "--overlap", "40"]) == 0
    return out


def fixture_file(tmp_path, entries, name="fx.jsonl"):
    path = tmp_path / name
    save_fixture(entries, path)
    return path


def bench_entries(n_queries, modes, ks, n=2, m=1, answers=None):
    """Fixture entries in the exact call order of ``bench`` (modes outer, k, then queries)."""
    roles = EXAMPLE_ROLES[:n]
    entries = []
    for mode in modes:
        for _ in ks:
            for i in range(n_queries):
                answer = (answers or {}).get((mode, i), "Answer: (A)")
                if mode == "baseline_rag":
                    entries.append(FixtureEntry(answer))
                else:
                    rounds = [[f"insight {j}" for j in range(n)]] * m
                    entries.extend(discuss_rag_entries(roles, rounds, answer=answer))
    return entries


class TestIndex:
    def test_builds(self, tmp_path, corpus, capsys):
        out = tmp_path / "i.drix"
        assert main(["index", str(corpus), "--out", str(out), "--chunk-size", "200", "--overlap", "40"]) == 0
        text = capsys.readouterr().out
        n_chunks = int(next(l for l in text.splitlines() if l.startswith("chunks:")).split()[1])
        assert n_chunks >= 3 and out.exists()

    def test_missing_corpus(self, tmp_path, capsys):
        missing = tmp_path / "nope.jsonl"
        assert main(["index", str(missing)]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_bad_chunking_is_usage_error(self, tmp_path, corpus):
        assert main(["index", str(corpus), "--out", str(tmp_path / "x"), "--chunk-size", "10", "--overlap", "10"]) == 2

    def test_rebuild_byte_identical(self, tmp_path, corpus):
        a, b = tmp_path / "a.drix", tmp_path / "b.drix"
        for out in (a, b):
            assert main(["index", str(corpus), "--out", str(out)]) == 0
        assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()


class TestAsk:
    def _run(self, tmp_path, index_file, entries, *extra):
        fx = fixture_file(tmp_path, entries)
        return main(["ask", "Why is cardiac venous blood so desaturated?", "--option", "A=high extraction",
                     "--option", "B=shunting", "--index", str(index_file), "--scripted-fixture", str(fx),
                     "--out-dir", str(tmp_path / "run"), "--n-experts", "3", "--m-rounds", "1", *extra])

    def test_discuss_rag(self, tmp_path, index_file, capsys):
        entries = discuss_rag_entries(EXAMPLE_ROLES, [["a", "b", "c"]], answer="Answer: (B)")
        assert self._run(tmp_path, index_file, entries, "--k", "2") == 0
        out = capsys.readouterr().out
        assert "answer: B  [strategy: rag]" in out
        (rec,) = read_traces(tmp_path / "run" / "trace.jsonl")
        assert rec["mode"] == "discuss_rag" and len(rec["snippets"]) == 2
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["backend"].startswith("scripted:") and manifest["fixture_sha256"]
        assert manifest["corpus_fingerprint"] and manifest["template_fingerprint"]

    def test_baseline_k0(self, tmp_path, index_file, capsys):
        assert self._run(tmp_path, index_file, [FixtureEntry("Answer: (A)")], "--mode", "baseline_rag",
                         "--k", "0") == 0
        out = capsys.readouterr().out
        assert "answer: A" in out and "snippets: (none)" in out

    def test_invalid_mode(self, tmp_path, index_file, capsys):
        assert self._run(tmp_path, index_file, [], "--mode", "medrag") == 2
        assert "usage" in capsys.readouterr().err

    def test_unparseable_answer_is_domain_failure(self, tmp_path, index_file):
        entries = [FixtureEntry("unsure"), FixtureEntry("still unsure")]
        assert self._run(tmp_path, index_file, entries, "--mode", "baseline_rag") == 1

    def test_no_backend(self, tmp_path, index_file, monkeypatch):
        monkeypatch.delenv("DISCUSS_RAG_API_KEY", raising=False)
        monkeypatch.delenv("DISCUSS_RAG_BASE_URL", raising=False)
        assert main(["ask", "q?", "--yes-no", "--index", str(index_file), "--out-dir", str(tmp_path)]) == 2

    def test_embedder_mismatch(self, tmp_path, index_file):
        assert self._run(tmp_path, index_file, [FixtureEntry("Answer: (A)")], "--embed-dim", "32") == 2

    def test_options_required(self, tmp_path, index_file):
        fx = fixture_file(tmp_path, [])
        assert main(["ask", "q?", "--index", str(index_file), "--scripted-fixture", str(fx)]) == 2

    def test_config_file_and_flag_precedence(self, tmp_path, index_file):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"mode": "baseline_rag", "k": 1}))
        assert self._run(tmp_path, index_file, [FixtureEntry("Answer: (A)")], "--config", str(cfg)) == 0
        (rec,) = read_traces(tmp_path / "run" / "trace.jsonl")
        assert (rec["mode"], rec["k"]) == ("baseline_rag", 1)
        assert self._run(tmp_path, index_file, [FixtureEntry("Answer: (A)")], "--config", str(cfg),
                         "--k", "2") == 0
        assert read_traces(tmp_path / "run" / "trace.jsonl")[-1]["k"] == 2

    def test_unknown_config_key(self, tmp_path, index_file):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"kk": 1}))
        assert self._run(tmp_path, index_file, [], "--config", str(cfg)) == 2


class TestBench:
    def _bench(self, tmp_path, index_file, entries, *extra, dataset=DATA / "mmlu_med.jsonl", out="bench"):
        fx = fixture_file(tmp_path, entries, name=f"{out}.jsonl")
        return main(["bench", "--dataset", str(dataset), "--dataset-kind", "mmlu_med", "--index", str(index_file),
                     "--scripted-fixture", str(fx), "--out-dir", str(tmp_path / out),
                     "--n-experts", "2", "--m-rounds", "1", *extra])

    def test_k_sweep(self, tmp_path, index_file):
        entries = bench_entries(5, ["baseline_rag"], [1, 3, 5])
        assert self._bench(tmp_path, index_file, entries, "--mode", "baseline_rag", "--k-sweep", "1,3,5") == 0
        reports = json.loads((tmp_path / "bench" / "reports.json").read_text())
        assert [r["k"] for r in reports] == [1, 3, 5]

    def test_both_modes_table(self, tmp_path, index_file, capsys):
        gold = [q.gold for q in load_dataset(DATA / "mmlu_med.jsonl", "mmlu_med")]
        answers = {("discuss_rag", i): f"Answer: ({g})" for i, g in enumerate(gold)}
        entries = bench_entries(5, ["baseline_rag", "discuss_rag"], [2], answers=answers)
        assert self._bench(tmp_path, index_file, entries, "--mode", "both", "--k", "2") == 0
        out = capsys.readouterr().out
        header = out.splitlines()[0]
        assert [c.strip() for c in header.split("|")] == ["dataset", "mode", "k", "accuracy", "delta"]
        # baseline answers A everywhere: 1/5 correct; discuss answers gold: 5/5
        assert "20.00%" in out and "100.00%" in out and "+80.00%" in out

    def test_empty_dataset(self, tmp_path, index_file):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert self._bench(tmp_path, index_file, [], dataset=empty) == 2

    def test_malformed_dataset(self, tmp_path, index_file, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"id": 1}\n')
        assert self._bench(tmp_path, index_file, [], dataset=bad) == 2
        assert "line 1" in capsys.readouterr().err


class TestTrace:
    @pytest.fixture
    def trace_file(self, tmp_path, index_file):
        entries = discuss_rag_entries(EXAMPLE_ROLES, [["a", "b", "c"], ["a2", "NO FURTHER INPUT", "c2"]])
        fx = fixture_file(tmp_path, entries)
        assert main(["ask", "Which chamber?", "--option", "A=left", "--option", "B=right", "--index",
                     str(index_file), "--scripted-fixture", str(fx), "--out-dir", str(tmp_path / "run"),
                     "--m-rounds", "2"]) == 0
        return tmp_path / "run" / "trace.jsonl"

    def test_existing(self, trace_file, capsys):
        assert main(["trace", str(trace_file), "ask"]) == 0
        out = capsys.readouterr().out
        for header in ("-- roster --", "-- rounds --", "-- distilled summary --", "-- snippets --",
                       "-- verdict --", "-- answer --"):
            assert header in out
        assert "health economist" in out

    def test_unknown_id(self, trace_file):
        assert main(["trace", str(trace_file), "missing"]) == 1

    def test_round_count_matches_transcript(self, trace_file, capsys):
        main(["trace", str(trace_file), "ask"])
        out = capsys.readouterr().out
        (rec,) = read_traces(trace_file)
        summarized = len(rec["transcript"]["summaries"]) - 1
        assert f"rounds: {summarized} summarized" in out
        assert summarized == 2

    def test_missing_file(self, tmp_path):
        assert main(["trace", str(tmp_path / "none.jsonl"), "x"]) == 2
