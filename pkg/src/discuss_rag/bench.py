"""Benchmark runs: accuracy reports, k-sweeps and the comparison table."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

from .errors import ParseFailure, PipelineError
from .index import VectorIndex
from .pipeline import PipelineConfig, PipelineTrace, answer_query
from .query import Query
from .templates import PromptTemplates

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuestionResult:
    query_id: str
    predicted: str | None
    gold: str
    strategy: str
    correct: bool


@dataclass
class RunReport:
    dataset: str
    mode: str
    k: int
    n_questions: int = 0
    n_correct: int = 0
    accuracy: float | None = None  # None when every query failed
    per_question: list[QuestionResult] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def strategy_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.per_question:
            counts[r.strategy] = counts.get(r.strategy, 0) + 1
        return dict(sorted(counts.items()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["failures"] = [list(f) for f in self.failures]
        d["strategy_counts"] = self.strategy_counts
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["dataset"], d["mode"], d["k"], d["n_questions"], d["n_correct"], d["accuracy"],
                   [QuestionResult(**q) for q in d["per_question"]],
                   [tuple(f) for f in d["failures"]])


def finalize_report(report: RunReport) -> RunReport:
    """Sort rows by query_id and recompute the counts and accuracy."""
    report.per_question.sort(key=lambda r: r.query_id)
    report.failures.sort()
    report.n_correct = sum(1 for r in report.per_question if r.correct)
    scored = report.n_questions - len(report.failures)
    report.accuracy = report.n_correct / scored if scored > 0 else None
    return report


def _strategy_of(trace: PipelineTrace | None) -> str:
    if trace is not None and trace.verdict is not None and not trace.verdict.accepted:
        return "cot_fallback"
    return "rag"


def evaluate(
    queries: Sequence[Query],
    config: PipelineConfig,
    index: VectorIndex,
    gateway,
    *,
    templates: PromptTemplates | None = None,
    parallel: int = 1,
    clock: Callable[[], float] = time.perf_counter,
    trace_sink: Callable[[PipelineTrace], None] | None = None,
) -> RunReport:
    """Run ``answer_query`` over ``queries`` and aggregate accuracy.

    Unparseable answers count as wrong; any other per-query error is a failure,
    excluded from the denominator. Traces reach ``trace_sink`` in input order.
    """
    if parallel < 1:
        raise ValueError("parallel must be >= 1")
    if parallel > 1 and not getattr(gateway, "thread_safe", True):
        raise ValueError("this scripted backend consumes fixtures in order; run it with parallel=1")
    kinds = {q.dataset for q in queries}
    report = RunReport(kinds.pop() if len(kinds) == 1 else "mixed", config.mode, config.k,
                       n_questions=len(queries))

    def run(q: Query):
        try:
            answer, trace = answer_query(q, config, index, gateway, templates=templates, clock=clock)
            return q, answer, trace, None
        except PipelineError as exc:
            return q, None, exc.trace, exc

    if parallel == 1:
        outcomes = [run(q) for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(run, queries))

    for q, answer, trace, exc in outcomes:
        if trace_sink is not None and trace is not None:
            trace_sink(trace)
        if answer is not None:
            report.per_question.append(
                QuestionResult(q.query_id, answer.choice, q.gold, answer.strategy, answer.choice == q.gold))
        elif isinstance(exc.cause, ParseFailure):
            logger.info("unparseable answer for %s scored as incorrect", q.query_id)
            report.per_question.append(QuestionResult(q.query_id, None, q.gold, _strategy_of(trace), False))
        else:
            logger.warning("query %s failed: %s", q.query_id, exc)
            report.failures.append((q.query_id, f"{exc.stage}: {type(exc.cause).__name__}: {exc.cause}"))
    return finalize_report(report)


def sweep_k(queries, config: PipelineConfig, ks: Iterable[int], index, gateway, **kwargs) -> list[RunReport]:
    return [evaluate(queries, replace(config, k=k), index, gateway, **kwargs) for k in ks]


def _pct(acc: float | None) -> str:
    return "n/a" if acc is None else f"{acc * 100:.2f}%"


def accuracy_delta(baseline: float, method: float) -> float:
    """Difference in percentage points, rounded to two decimals."""
    return round(round(method * 100, 2) - round(baseline * 100, 2), 2)


def format_delta(delta: float) -> str:
    return f"{delta:+.2f}%"


def comparison_rows(reports: Sequence[RunReport]) -> list[tuple[str, str, int, str, str]]:
    """(dataset, mode, k, accuracy, delta) with delta filled for discuss_rag rows
    whose baseline counterpart (same dataset and k) is present."""
    base = {(r.dataset, r.k): r.accuracy for r in reports if r.mode == "baseline_rag"}
    rows = []
    for r in sorted(reports, key=lambda r: (r.dataset, r.k, r.mode != "baseline_rag")):
        delta = ""
        b = base.get((r.dataset, r.k))
        if r.mode == "discuss_rag" and b is not None and r.accuracy is not None:
            delta = format_delta(accuracy_delta(b, r.accuracy))
        rows.append((r.dataset, r.mode, r.k, _pct(r.accuracy), delta))
    return rows


def render_table(reports: Sequence[RunReport]) -> str:
    header = ("dataset", "mode", "k", "accuracy", "delta")
    rows = [tuple(map(str, row)) for row in comparison_rows(reports)]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(header), "-+-".join("-" * w for w in widths)]
    out.extend(line(r) for r in rows)
    return "\n".join(out)


def write_reports(reports: Sequence[RunReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
