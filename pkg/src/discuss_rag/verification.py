"""Post-retrieval gate and the two answer generators (with snippets, or CoT without)."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

from .discussion import EMPTY_SECTION, DistilledSummary
from .errors import AnswerParseError, ParseFailure, VerdictParseError
from .index import Snippet
from .query import Query, extract_choice
from .templates import PromptTemplates, default_templates

logger = logging.getLogger(__name__)

STRATEGIES = ("rag", "cot_fallback")
NO_SNIPPETS_RATIONALE = "no snippets retrieved"


@dataclass(frozen=True)
class RetrievalVerdict:
    accepted: bool
    rationale: str

    def __post_init__(self):
        if not self.rationale:
            raise ValueError("a verdict needs a rationale")


@dataclass(frozen=True)
class Answer:
    choice: str
    raw_generation: str
    strategy: str

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


def format_snippets(snippets: Sequence[Snippet]) -> str:
    if not snippets:
        return EMPTY_SECTION
    blocks = []
    for i, s in enumerate(snippets, 1):
        head = f"[{i}] {s.title}" if s.title else f"[{i}]"
        blocks.append(f"{head}\n{s.text}")
    return "\n\n".join(blocks)


_JUDGE_RE = re.compile(r"^[\W_]*(ACCEPT|REJECT)\b[\s:\-–—.]*(.*)$", re.IGNORECASE | re.DOTALL)


def _parse_judgement(text: str) -> RetrievalVerdict:
    m = _JUDGE_RE.match(text.strip())
    if not m:
        raise ValueError("reply must begin with ACCEPT or REJECT")
    accepted = m.group(1).upper() == "ACCEPT"
    rationale = m.group(2).strip() or ("accepted" if accepted else "rejected")
    return RetrievalVerdict(accepted, rationale)


def judge_snippets(distilled: DistilledSummary, query: Query, snippets: Sequence[Snippet], gateway,
                   *, templates: PromptTemplates | None = None,
                   model_id: str = "") -> RetrievalVerdict:
    """Holistic accept/reject over the whole snippet set.

    Empty retrieval is rejected without a gateway call; otherwise at most two
    calls (one re-prompt on an unparseable reply).
    """
    if not snippets:
        return RetrievalVerdict(False, NO_SNIPPETS_RATIONALE)
    templates = templates or default_templates()
    request = templates.request(
        "judge", model_id, query=query.stem, options=query.options_block(),
        distilled=distilled.content or EMPTY_SECTION, snippets=format_snippets(snippets),
    )
    reply = gateway.complete(request).content
    try:
        return _parse_judgement(reply)
    except ValueError:
        retry = request.followup(reply, "Begin your reply with ACCEPT or REJECT, then one line of rationale.")
        reply = gateway.complete(retry).content
        try:
            return _parse_judgement(reply)
        except ValueError as exc:
            raise VerdictParseError(f"decision-maker reply unusable after retry: {reply[:120]!r}") from exc


def _generate(name: str, strategy: str, query: Query, gateway, templates: PromptTemplates,
              model_id: str, **values) -> Answer:
    labels = ", ".join(query.labels)
    request = templates.request(name, model_id, query=query.stem, options=query.options_block(),
                                labels=labels, **values)
    reply = gateway.complete(request).content
    try:
        return Answer(extract_choice(reply, query), reply, strategy)
    except ParseFailure:
        logger.info("no answer label in %s reply for %s; re-prompting", strategy, query.query_id)
    retry = request.followup(reply, f'Reply with one line of the form "Answer: (X)" where X is one of: {labels}.')
    reply = gateway.complete(retry).content
    try:
        return Answer(extract_choice(reply, query), reply, strategy)
    except ParseFailure as exc:
        raise AnswerParseError(f"no valid answer for {query.query_id!r} after retry", raw=reply) from exc


def answer_with_context(query: Query, snippets: Sequence[Snippet], gateway, *,
                        templates: PromptTemplates | None = None, model_id: str = "") -> Answer:
    return _generate("answer_rag", "rag", query, gateway, templates or default_templates(),
                     model_id, snippets=format_snippets(snippets))


def answer_with_cot(query: Query, gateway, *, templates: PromptTemplates | None = None,
                    model_id: str = "") -> Answer:
    return _generate("answer_cot", "cot_fallback", query, gateway, templates or default_templates(),
                     model_id)
