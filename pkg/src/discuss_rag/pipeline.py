"""End-to-end answering: Discuss-RAG and the query-only baseline."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .discussion import (
    DiscussionConfig,
    DiscussionTranscript,
    DistilledSummary,
    run_discussion,
    verify_summary,
)
from .errors import PipelineError
from .gateway import CallCounter
from .index import Snippet, VectorIndex, retrieve_top_k
from .query import Query
from .templates import PromptTemplates, default_templates
from .verification import (
    Answer,
    RetrievalVerdict,
    answer_with_context,
    answer_with_cot,
    judge_snippets,
)

TRACE_SCHEMA = "trace_v1"
MODES = ("discuss_rag", "baseline_rag")


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "discuss_rag"
    k: int = 5
    discussion: DiscussionConfig = field(default_factory=DiscussionConfig)
    model_id: str = ""
    template_dir: str | None = None
    index_path: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.k < 0:
            raise ValueError("k must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineTrace:
    query_id: str
    mode: str
    k: int
    question: str = ""
    roster: list | None = None
    transcript: DiscussionTranscript | None = None
    distilled: DistilledSummary | None = None
    retrieval_query_text: str = ""
    snippets: list[Snippet] = field(default_factory=list)
    verdict: RetrievalVerdict | None = None
    answer: Answer | None = None
    timings: dict[str, float] = field(default_factory=dict)
    gateway_call_count: int = 0
    error: dict | None = None
    schema: str = TRACE_SCHEMA

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.transcript is not None:
            d["roster"] = d["transcript"]["roster"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


def baseline_retrieval_text(query: Query) -> str:
    return f"QUESTION: {query.stem}"


def build_retrieval_text(query: Query, distilled: DistilledSummary | None) -> str:
    """Question stem plus the distilled background; falls back to the baseline text."""
    if distilled is None or not distilled.content.strip():
        return baseline_retrieval_text(query)
    return f"{baseline_retrieval_text(query)}\nBACKGROUND: {distilled.content}"


def answer_query(
    query: Query,
    config: PipelineConfig,
    index: VectorIndex,
    gateway,
    *,
    templates: PromptTemplates | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> tuple[Answer, PipelineTrace]:
    """Answer one query, recording every stage.

    Any stage failure is re-raised as PipelineError carrying the partial trace.
    """
    if templates is None:
        templates = PromptTemplates.load(config.template_dir) if config.template_dir else default_templates()
    counter = CallCounter(gateway)
    trace = PipelineTrace(query.query_id, config.mode, config.k, question=query.stem)
    kw = {"templates": templates, "model_id": config.model_id}
    stage = "start"

    def timed(name, fn, *args, **kwargs):
        nonlocal stage
        stage = name
        t0 = clock()
        try:
            return fn(*args, **kwargs)
        finally:
            trace.timings[name] = clock() - t0

    try:
        if config.mode == "discuss_rag":
            final, transcript = timed("discussion", run_discussion, query, config.discussion, counter, **kw)
            trace.transcript = transcript
            trace.roster = transcript.roster
            trace.distilled = timed("verify_summary", verify_summary, final, query, counter, **kw)
            trace.retrieval_query_text = build_retrieval_text(query, trace.distilled)
        else:
            trace.retrieval_query_text = baseline_retrieval_text(query)
        (qvec,) = timed("embed", counter.embed, [trace.retrieval_query_text])
        trace.snippets = timed("retrieve", retrieve_top_k, index, qvec, config.k)
        if config.mode == "discuss_rag":
            trace.verdict = timed("judge", judge_snippets, trace.distilled, query, trace.snippets, counter, **kw)
            if trace.verdict.accepted:
                answer = timed("answer", answer_with_context, query, trace.snippets, counter, **kw)
            else:
                answer = timed("answer", answer_with_cot, query, counter, **kw)
        else:
            answer = timed("answer", answer_with_context, query, trace.snippets, counter, **kw)
    except Exception as exc:
        trace.gateway_call_count = counter.calls
        trace.error = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}
        raise PipelineError(stage, exc, trace) from exc
    trace.answer = answer
    trace.gateway_call_count = counter.calls
    return answer, trace


def append_trace(trace: PipelineTrace, path: str | Path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(trace.to_json() + "\n")


def read_traces(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
