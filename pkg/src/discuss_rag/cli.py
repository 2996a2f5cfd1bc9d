"""Command line entry point: ``discuss-rag {index,ask,bench,trace}``.

Settings resolve as flags > ``--config`` JSON file > environment > defaults.
Exit status: 0 success, 1 domain failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import textwrap
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .bench import evaluate, render_table, write_reports
from .discussion import DiscussionConfig
from .errors import DatasetFormatError, DiscussRAGError, FormatError, PipelineError
from .gateway import API_KEY_ENV, OpenAICompatBackend, ScriptedBackend
from .index import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_OVERLAP,
    index_corpus,
    load_corpus,
    load_index,
    save_index,
)
from .pipeline import MODES, PipelineConfig, answer_query, append_trace, read_traces
from .query import DATASET_KINDS, Query, load_dataset
from .templates import PromptTemplates

logger = logging.getLogger("discuss_rag")

DEFAULTS = {
    "mode": "discuss_rag",
    "k": 5,
    "n_experts": 3,
    "m_rounds": 3,
    "model": "gpt-3.5-turbo-0125",
    "embedding_model": "text-embedding-3-small",
    "base_url": None,
    "template_dir": None,
    "index": "index.drix",
    "scripted_fixture": None,
    "out_dir": "runs",
    "parallel": 1,
    "embed_dim": 64,
    "seed": 42,
    "chunk_size": DEFAULT_CHUNK_SIZE,
    "overlap": DEFAULT_OVERLAP,
}
ENV_VARS = {
    "base_url": "DISCUSS_RAG_BASE_URL",
    "model": "DISCUSS_RAG_MODEL",
    "index": "DISCUSS_RAG_INDEX",
}
OPENAI_URL = "https://api.openai.com/v1"


class UsageError(Exception):
    pass


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid k list {text!r}")
    if not ks or any(k < 0 for k in ks):
        raise argparse.ArgumentTypeError("k values must be non-negative integers")
    return ks


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default settings")
    common.add_argument("--model")
    common.add_argument("--embedding-model")
    common.add_argument("--base-url")
    common.add_argument("--template-dir")
    common.add_argument("--index", help="index file path")
    common.add_argument("--scripted-fixture", help="replay completions from this JSON-lines fixture")
    common.add_argument("--out-dir")
    common.add_argument("--embed-dim", type=int, help="dimension of the hashing embedder")
    common.add_argument("--seed", type=int, help="seed of the hashing embedder")
    common.add_argument("-v", "--verbose", action="store_true")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--k", type=int)
    run.add_argument("--n-experts", type=int)
    run.add_argument("--m-rounds", type=int)

    parser = argparse.ArgumentParser(prog="discuss-rag", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", parents=[common], help="chunk and embed a corpus")
    p.add_argument("corpus", help="JSON-lines corpus (doc_id, title, body)")
    p.add_argument("--out", help="index file to write (default: --index)")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--no-snap", action="store_true", help="do not move cuts to whitespace")

    p = sub.add_parser("ask", parents=[common, run], help="answer one question")
    p.add_argument("question")
    p.add_argument("--option", action="append", default=[], metavar="LABEL=TEXT")
    p.add_argument("--yes-no", action="store_true", help="options are yes / no")
    p.add_argument("--yes-no-maybe", action="store_true", help="options are yes / no / maybe")

    p = sub.add_parser("bench", parents=[common], help="evaluate over a dataset")
    p.add_argument("--mode", choices=MODES + ("both",))
    p.add_argument("--k", type=int)
    p.add_argument("--n-experts", type=int)
    p.add_argument("--m-rounds", type=int)
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-kind", choices=DATASET_KINDS, required=True)
    p.add_argument("--k-sweep", type=_k_list, help="comma-separated k values, e.g. 1,3,5")
    p.add_argument("--parallel", type=int)
    p.add_argument("--limit", type=int, help="only the first N questions")

    p = sub.add_parser("trace", help="pretty-print one query's trace")
    p.add_argument("trace_path")
    p.add_argument("query_id")
    return parser


def resolve_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    for key, var in ENV_VARS.items():
        if os.environ.get(var):
            settings[key] = os.environ[var]
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        settings.update(file_cfg)
    for key, value in vars(args).items():
        if value is not None and key in DEFAULTS:
            settings[key] = value
    return settings


def make_backend(s: dict, need_chat: bool = True):
    if s["scripted_fixture"]:
        path = s["scripted_fixture"]
        if not Path(path).exists():
            raise UsageError(f"fixture not found: {path}")
        return ScriptedBackend.from_file(path, dim=s["embed_dim"], seed=s["seed"])
    if s["base_url"] or os.environ.get(API_KEY_ENV):
        return OpenAICompatBackend(s["base_url"] or OPENAI_URL, model_id=s["model"],
                                   embedding_model=s["embedding_model"])
    if need_chat:
        raise UsageError(f"no backend: pass --scripted-fixture, or --base-url / {API_KEY_ENV}")
    return ScriptedBackend(dim=s["embed_dim"], seed=s["seed"])


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, args, settings: dict, index, templates: PromptTemplates,
                   backend) -> None:
    manifest = {
        "command": {k: v for k, v in vars(args).items() if k != "verbose"},
        "config": settings,
        "corpus_fingerprint": index.metadata.get("corpus_fingerprint", ""),
        "index_embedder": index.metadata.get("embedder_id", ""),
        "template_fingerprint": templates.fingerprint,
        "backend": backend.identity,
        "fixture_sha256": _file_digest(settings["scripted_fixture"]) if settings["scripted_fixture"] else None,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_run_inputs(s: dict):
    if not Path(s["index"]).exists():
        raise UsageError(f"index not found: {s['index']}")
    try:
        index = load_index(s["index"])
    except FormatError as exc:
        raise UsageError(f"{s['index']}: {exc}")
    backend = make_backend(s)
    if index.metadata.get("embedder_id") != backend.embedder_id:
        raise UsageError(f"index was built with {index.metadata.get('embedder_id')!r}, "
                         f"backend embeds with {backend.embedder_id!r}")
    try:
        templates = PromptTemplates.load(s["template_dir"])
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc))
    return index, backend, templates


def _pipeline_config(s: dict, mode: str, k: int) -> PipelineConfig:
    try:
        return PipelineConfig(mode=mode, k=k, discussion=DiscussionConfig(s["n_experts"], s["m_rounds"]),
                              model_id=s["model"], template_dir=s["template_dir"], index_path=s["index"])
    except ValueError as exc:
        raise UsageError(str(exc))


def _clock(backend):
    # frozen clock keeps scripted traces byte-identical across runs
    return (lambda: 0.0) if isinstance(backend, ScriptedBackend) else None


def cmd_index(args, s) -> int:
    corpus = Path(args.corpus)
    if not corpus.exists():
        raise UsageError(f"corpus not found: {corpus}")
    try:
        docs = load_corpus(corpus)
        backend = make_backend(s, need_chat=False)
        index = index_corpus(docs, backend, s["chunk_size"], s["overlap"], not args.no_snap)
    except DiscussRAGError as exc:
        raise UsageError(f"{corpus}: {exc}")
    out = args.out or s["index"]
    save_index(index, out)
    print(f"documents: {len(docs)}")
    print(f"chunks: {len(index)}")
    print(f"dim: {index.dim}")
    print(f"embedder: {index.metadata['embedder_id']}")
    print(f"wrote {out}")
    return 0


def _ask_query(args) -> Query:
    if args.yes_no or args.yes_no_maybe:
        return Query.yes_no("ask", args.question, "yes", maybe=args.yes_no_maybe)
    options = {}
    for item in args.option:
        label, sep, text = item.partition("=")
        if not sep or not label.strip():
            raise UsageError(f"--option expects LABEL=TEXT, got {item!r}")
        options[label.strip()] = text.strip()
    if not options:
        raise UsageError("give --option LABEL=TEXT at least once, or --yes-no / --yes-no-maybe")
    # gold is unknown for ad-hoc questions; the first label is a placeholder
    return Query.multiple_choice("ask", args.question, options, next(iter(options)))


def cmd_ask(args, s) -> int:
    query = _ask_query(args)
    index, backend, templates = _load_run_inputs(s)
    config = _pipeline_config(s, s["mode"], s["k"])
    out_dir = Path(s["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, args, s, index, templates, backend)
    clock = _clock(backend)
    kwargs = {"templates": templates} | ({"clock": clock} if clock else {})
    try:
        answer, trace = answer_query(query, config, index, backend, **kwargs)
    except PipelineError as exc:
        if exc.trace is not None:
            append_trace(exc.trace, out_dir / "trace.jsonl")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    append_trace(trace, out_dir / "trace.jsonl")
    print(f"answer: {answer.choice}  [strategy: {answer.strategy}]")
    if trace.verdict is not None:
        print(f"verdict: {'ACCEPT' if trace.verdict.accepted else 'REJECT'} - {trace.verdict.rationale}")
    print("snippets:" + ("" if trace.snippets else " (none)"))
    for i, snip in enumerate(trace.snippets[:3], 1):
        preview = " ".join(snip.text.split())[:100]
        print(f"  [{i}] {snip.chunk_id} score={snip.score:.4f} {preview}")
    print(f"trace: {out_dir / 'trace.jsonl'}")
    return 0


def cmd_bench(args, s) -> int:
    dataset = Path(args.dataset)
    if not dataset.exists():
        raise UsageError(f"dataset not found: {dataset}")
    try:
        queries = load_dataset(dataset, args.dataset_kind)
    except DatasetFormatError as exc:
        raise UsageError(str(exc))
    if args.limit is not None:
        queries = queries[:args.limit]
    if not queries:
        raise UsageError(f"dataset {dataset} has no questions")
    index, backend, templates = _load_run_inputs(s)
    modes = list(MODES[::-1]) if s["mode"] == "both" else [s["mode"]]
    ks = args.k_sweep or [s["k"]]
    out_dir = Path(s["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, args, s, index, templates, backend)
    trace_path = out_dir / "traces.jsonl"
    trace_path.write_text("")
    clock = _clock(backend)
    reports = []
    for mode in modes:
        for k in ks:
            config = _pipeline_config(s, mode, k)
            kwargs = {"templates": templates, "parallel": s["parallel"],
                      "trace_sink": lambda t: append_trace(t, trace_path)}
            if clock:
                kwargs["clock"] = clock
            try:
                report = evaluate(queries, config, index, backend, **kwargs)
            except ValueError as exc:
                raise UsageError(str(exc))
            reports.append(report)
    write_reports(reports, out_dir / "reports.json")
    print(render_table(reports))
    print(f"\nreports: {out_dir / 'reports.json'}  traces: {trace_path}")
    return 0


def _wrap(text: str, indent: str = "    ") -> str:
    text = text or "(empty)"
    return textwrap.indent(text.strip(), indent)


def format_trace(rec: dict) -> str:
    lines = [f"== query {rec['query_id']} ({rec['mode']}, k={rec['k']}) =="]
    if rec.get("question"):
        lines.append(_wrap(rec["question"], "  "))
    transcript = rec.get("transcript")
    lines.append("-- roster --")
    if transcript:
        for a in transcript["roster"]:
            lines.append(f"  - {a['role_name']} ({a['specialty']})")
    else:
        lines.append("  (none)")
    lines.append("-- rounds --")
    if transcript:
        summaries = {s["round"]: s["content"] for s in transcript["summaries"]}
        attempted = max((i["round"] for i in transcript["insights"]), default=0)
        lines.append(f"  rounds: {len(summaries) - 1} summarized, {attempted} attempted "
                     f"(termination: {transcript['termination_reason']})")
        for j in range(1, attempted + 1):
            lines.append(f"  round {j}")
            for ins in transcript["insights"]:
                if ins["round"] != j:
                    continue
                body = "declined" + (f" ({ins['note']})" if ins.get("note") else "") if ins["declined"] else ins["content"]
                lines.append(f"    [{ins['author']}]")
                lines.append(_wrap(body, "      "))
            if j in summaries:
                lines.append("    summary:")
                lines.append(_wrap(summaries[j], "      "))
    else:
        lines.append("  (none)")
    lines.append("-- distilled summary --")
    d = rec.get("distilled")
    if d:
        lines.append(f"  verified: {d['verified']}" + (f"; notes: {d['verifier_notes']}" if d["verifier_notes"] else ""))
        lines.append(_wrap(d["content"]))
    else:
        lines.append("  (none)")
    lines.append("-- snippets --")
    lines.append(_wrap(rec.get("retrieval_query_text", ""), "  retrieval text: "))
    if not rec.get("snippets"):
        lines.append("  (none)")
    for i, snip in enumerate(rec.get("snippets", []), 1):
        lines.append(f"  [{i}] {snip['chunk_id']} score={snip['score']:.4f}")
        lines.append(_wrap(snip["text"][:300]))
    lines.append("-- verdict --")
    v = rec.get("verdict")
    lines.append(f"  {'ACCEPT' if v['accepted'] else 'REJECT'}: {v['rationale']}" if v else "  (none)")
    lines.append("-- answer --")
    a = rec.get("answer")
    if a:
        lines.append(f"  {a['choice']} [strategy: {a['strategy']}]")
    if rec.get("error"):
        e = rec["error"]
        lines.append(f"  error at {e['stage']}: {e['type']}: {e['message']}")
    lines.append(f"  gateway calls: {rec.get('gateway_call_count', 0)}")
    return "\n".join(lines)


def cmd_trace(args, s) -> int:
    path = Path(args.trace_path)
    if not path.exists():
        raise UsageError(f"trace file not found: {path}")
    matches = [r for r in read_traces(path) if r.get("query_id") == args.query_id]
    if not matches:
        print(f"no trace for query {args.query_id!r} in {path}", file=sys.stderr)
        return 1
    print("\n\n".join(format_trace(r) for r in matches))
    return 0


COMMANDS = {"index": cmd_index, "ask": cmd_ask, "bench": cmd_bench, "trace": cmd_trace}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args)
        return COMMANDS[args.command](args, settings)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
