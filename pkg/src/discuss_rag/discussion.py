"""Multi-turn expert brainstorming with a running summary.

A recruiter assembles ``n`` experts. In every round each expert sees the
question stem and the previous summary and either contributes an insight or
declines; the summarizer folds the round's insights and the previous summary
into the next one:

    summary[j] = summarize(insights[j], summary[j-1], query),  summary[0] = ""

The loop stops after ``m`` rounds or as soon as a whole round declines. A
verifier then checks the final summary and distills it for retrieval.

Answer options never reach these prompts; only the stem is shown.
"""
from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field

from .errors import (
    AllDeclined,
    BackendRefusal,
    RosterParseError,
    TransportError,
    VerdictParseError,
)
from .query import Query
from .templates import PromptTemplates, default_templates

logger = logging.getLogger(__name__)

DECLINE_SENTINEL = "NO FURTHER INPUT"
NO_ANSWER_CONSTRAINT = (
    "Do not answer the question and do not infer a final conclusion; "
    "contribute only background knowledge and reasoning that helps find relevant references."
)
EMPTY_SECTION = "(none)"


@dataclass(frozen=True)
class AgentProfile:
    role_name: str
    specialty: str
    persona_prompt: str

    @classmethod
    def create(cls, role_name: str, specialty: str = "") -> "AgentProfile":
        specialty = specialty or role_name
        persona = (f"You are a {role_name} (specialty: {specialty}) taking part in a team "
                   f"discussion about a medical question. {NO_ANSWER_CONSTRAINT}")
        return cls(role_name, specialty, persona)


@dataclass(frozen=True)
class Insight:
    author: str
    round: int
    content: str
    declined: bool
    note: str = ""

    def __post_init__(self):
        if self.declined != (self.content == ""):
            raise ValueError("an insight is declined exactly when its content is empty")


@dataclass(frozen=True)
class RoundSummary:
    round: int
    content: str

    def __post_init__(self):
        if self.round < 0:
            raise ValueError("round must be non-negative")
        if self.round == 0 and self.content:
            raise ValueError("the round-0 summary is empty by definition")


@dataclass(frozen=True)
class DiscussionConfig:
    n: int = 3
    m: int = 3

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("team size n must be >= 1")
        if self.m < 0:
            raise ValueError("max rounds m must be >= 0")


@dataclass(frozen=True)
class DistilledSummary:
    content: str
    verified: bool
    verifier_notes: str = ""


@dataclass
class DiscussionTranscript:
    roster: list[AgentProfile] = field(default_factory=list)
    insights: list[Insight] = field(default_factory=list)
    summaries: list[RoundSummary] = field(default_factory=lambda: [RoundSummary(0, "")])
    termination_reason: str = "max_rounds"

    @property
    def rounds_attempted(self) -> int:
        return max((i.round for i in self.insights), default=0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscussionTranscript":
        return cls(
            roster=[AgentProfile(**a) for a in d["roster"]],
            insights=[Insight(**i) for i in d["insights"]],
            summaries=[RoundSummary(**s) for s in d["summaries"]],
            termination_reason=d["termination_reason"],
        )


# --------------------------------------------------------------------------
# recruiter

_ROLE_RE = re.compile(
    r"^\s*(?:[-*•]|\d+[.)])?\s*\**ROLE\**\s*:\s*(?P<role>[^|\n]+?)\s*"
    r"(?:\|\s*\**SPECIALTY\**\s*:\s*(?P<spec>[^\n]+?))?\s*$",
    re.IGNORECASE | re.MULTILINE,
)


def parse_roster(text: str, n: int) -> list[AgentProfile]:
    """Parse ``ROLE: x | SPECIALTY: y`` lines; raises ValueError with the reason."""
    found = [(m.group("role").strip(), (m.group("spec") or "").strip())
             for m in _ROLE_RE.finditer(text)]
    if len(found) < n:
        raise ValueError(f"found {len(found)} role lines, need {n}")
    found = found[:n]
    names = [r.casefold() for r, _ in found]
    if len(set(names)) != len(names):
        raise ValueError("role names must be distinct")
    return [AgentProfile.create(r, s) for r, s in found]


def recruit(query: Query, n: int, gateway, *, templates: PromptTemplates | None = None,
            model_id: str = "") -> list[AgentProfile]:
    if n < 1:
        raise ValueError("n must be >= 1")
    templates = templates or default_templates()
    request = templates.request("recruiter", model_id, query=query.stem, n=n)
    reply = gateway.complete(request).content
    try:
        return parse_roster(reply, n)
    except ValueError as first:
        logger.info("roster parse failed (%s); re-prompting once", first)
        retry = request.followup(
            reply,
            f"That reply could not be used: {first}. Reply with exactly {n} lines of the form "
            f"ROLE: <role name> | SPECIALTY: <area of expertise>, each role distinct.",
        )
        reply = gateway.complete(retry).content
        try:
            return parse_roster(reply, n)
        except ValueError as second:
            raise RosterParseError(f"recruiter reply unusable after retry: {second}") from second


# --------------------------------------------------------------------------
# experts and summarizer

def _is_decline(text: str) -> bool:
    return text.strip().rstrip(".").strip().upper() == DECLINE_SENTINEL


def _summary_text(summary: RoundSummary) -> str:
    return summary.content if summary.content.strip() else EMPTY_SECTION


def gather_insights(round_j: int, roster: list[AgentProfile], prev_summary: RoundSummary,
                    query: Query, gateway, *, templates: PromptTemplates | None = None,
                    model_id: str = "") -> list[Insight]:
    """Ask each expert, in roster order, for this round's contribution.

    A transport or refusal error is recorded as a decline with a note rather
    than aborting the round.
    """
    if round_j < 1:
        raise ValueError("rounds are numbered from 1")
    if prev_summary.round != round_j - 1:
        raise ValueError(f"round {round_j} needs summary {round_j - 1}, got {prev_summary.round}")
    templates = templates or default_templates()
    insights = []
    for agent in roster:
        request = templates.request(
            "expert", model_id, persona=agent.persona_prompt, query=query.stem,
            prev_summary=_summary_text(prev_summary), no_answer=NO_ANSWER_CONSTRAINT,
            decline=DECLINE_SENTINEL,
        )
        try:
            reply = gateway.complete(request).content
        except (TransportError, BackendRefusal) as exc:
            logger.warning("expert %r failed in round %d: %s", agent.role_name, round_j, exc)
            insights.append(Insight(agent.role_name, round_j, "", True,
                                    note=f"call failed: {type(exc).__name__}: {exc}"))
            continue
        if _is_decline(reply) or not reply.strip():
            insights.append(Insight(agent.role_name, round_j, "", True))
        else:
            insights.append(Insight(agent.role_name, round_j, reply.strip(), False))
    return insights


def format_insights(insights: list[Insight]) -> str:
    return "\n\n".join(f"[{i.author}]\n{i.content}" for i in insights if not i.declined)


def summarize_round(insights: list[Insight], prev_summary: RoundSummary, query: Query, gateway,
                    *, templates: PromptTemplates | None = None, model_id: str = "") -> RoundSummary:
    if all(i.declined for i in insights):
        raise AllDeclined("summarize_round needs at least one contributed insight")
    templates = templates or default_templates()
    request = templates.request(
        "summarizer", model_id, query=query.stem,
        prev_summary=_summary_text(prev_summary), insights=format_insights(insights),
    )
    return RoundSummary(prev_summary.round + 1, gateway.complete(request).content)


def run_discussion(query: Query, config: DiscussionConfig, gateway, *,
                   templates: PromptTemplates | None = None,
                   model_id: str = "") -> tuple[RoundSummary, DiscussionTranscript]:
    templates = templates or default_templates()
    transcript = DiscussionTranscript(roster=recruit(query, config.n, gateway,
                                                     templates=templates, model_id=model_id))
    current = transcript.summaries[0]
    for j in range(1, config.m + 1):
        insights = gather_insights(j, transcript.roster, current, query, gateway,
                                   templates=templates, model_id=model_id)
        transcript.insights.extend(insights)
        if all(i.declined for i in insights):
            transcript.termination_reason = "all_declined"
            break
        current = summarize_round(insights, current, query, gateway,
                                  templates=templates, model_id=model_id)
        transcript.summaries.append(current)
    return current, transcript


# --------------------------------------------------------------------------
# verifier

_VERDICT_RE = re.compile(r"^\W*(PASS|FAIL)\b[ \t]*[:\-–—]?[ \t]*(.*)$", re.IGNORECASE | re.DOTALL)


def _parse_verifier(text: str) -> tuple[bool, str]:
    m = _VERDICT_RE.match(text.strip())
    if not m:
        raise ValueError("reply must start with PASS or FAIL")
    return m.group(1).upper() == "PASS", m.group(2).strip()


def verify_summary(final: RoundSummary, query: Query, gateway, *,
                   templates: PromptTemplates | None = None, model_id: str = "") -> DistilledSummary:
    """Check the final summary and distill it.

    On FAIL the raw summary is kept (``verified=False``) and the objection is
    recorded in ``verifier_notes``; callers carry on with it.
    """
    templates = templates or default_templates()
    request = templates.request("verifier", model_id, query=query.stem, summary=_summary_text(final))
    reply = gateway.complete(request).content
    try:
        passed, rest = _parse_verifier(reply)
    except ValueError:
        retry = request.followup(
            reply, "Start your reply with PASS (then the distilled summary) or FAIL: <objection>.")
        reply = gateway.complete(retry).content
        try:
            passed, rest = _parse_verifier(reply)
        except ValueError as exc:
            raise VerdictParseError(f"verifier reply unusable after retry: {reply[:120]!r}") from exc
    if passed:
        if rest:
            return DistilledSummary(rest, True, "")
        return DistilledSummary(final.content, True, "passed without a distilled rewrite")
    return DistilledSummary(final.content, False, rest or "verifier flagged the summary")
