from __future__ import annotations

import numpy as np
import pytest

from discuss_rag.discussion import DECLINE_SENTINEL
from discuss_rag.gateway import FixtureEntry, ScriptedBackend
from discuss_rag.index import Document, index_corpus
from discuss_rag.query import Query
from discuss_rag.templates import default_templates

ERROR = object()  # marks an expert call that fails in transport
DECLINE = None

EXAMPLE_ROLES = ["health care quality specialist", "hospital administrator", "health economist"]


def roster_reply(roles):
    return "\n".join(f"ROLE: {r} | SPECIALTY: {r} matters" for r in roles)


def request_kind(request) -> str:
    """Which prompt template produced ``request``."""
    system = request.messages[0].content
    templates = default_templates()
    for name in ("recruiter", "summarizer", "verifier", "judge", "answer_rag", "answer_cot"):
        if system == templates.sections[name][0]:
            return name
    if "taking part in a team discussion" in system:
        return "expert"
    raise AssertionError(f"unrecognised prompt: {system[:60]!r}")


def discussion_entries(roles, rounds, verifier="PASS\nDistilled background knowledge."):
    """Fixture entries, in call order, for one discussion.

    ``rounds[j][i]`` is expert i's reply in round j+1: text, DECLINE or ERROR.
    Stops after the first fully declined round, like the loop itself.
    """
    entries = [FixtureEntry(roster_reply(roles))]
    for j, replies in enumerate(rounds, 1):
        for reply in replies:
            if reply is ERROR:
                entries.append(FixtureEntry("injected failure", finish_reason="error"))
            else:
                entries.append(FixtureEntry(DECLINE_SENTINEL if reply is DECLINE else reply))
        if all(r is DECLINE or r is ERROR for r in replies):
            break
        entries.append(FixtureEntry(f"Summary after round {j}."))
    entries.append(FixtureEntry(verifier))
    return entries


def discuss_rag_entries(roles, rounds, verdict="ACCEPT - relevant", answer="Answer: (A)",
                        verifier="PASS\nDistilled background knowledge."):
    return discussion_entries(roles, rounds, verifier) + [FixtureEntry(verdict), FixtureEntry(answer)]


@pytest.fixture
def mc_query():
    return Query.multiple_choice(
        "q1",
        "Why is the oxygen content of cardiac venous blood unusually low?",
        {"A": "high myocardial oxygen extraction", "B": "shunting through Thebesian veins",
         "C": "low coronary flow", "D": "carboxyhemoglobin formation"},
        "A",
        dataset="medqa_us",
    )


@pytest.fixture
def yn_query():
    return Query.yes_no("p1", "Does metformin lower cardiovascular risk in type 2 diabetes?", "yes",
                        dataset="pubmedqa")


def make_docs(n_docs=6):
    topics = [
        ("cardio", "Cardiac physiology", "The myocardium extracts most oxygen delivered by coronary flow, "
         "so coronary sinus venous blood has very low oxygen saturation."),
        ("pharm", "Pharmacology", "Metformin reduces hepatic glucose output and is first line therapy "
         "for type 2 diabetes mellitus."),
        ("genetics", "Genetics", "Autosomal recessive disorders require two mutant alleles; carriers "
         "are heterozygous and usually unaffected."),
        ("vector", "Public health", "Mosquito population control uses larval source reduction, "
         "insecticide treated nets and environmental management."),
        ("renal", "Renal physiology", "The loop of Henle establishes the medullary concentration "
         "gradient through countercurrent multiplication."),
        ("immuno", "Immunology", "Regulatory T cells suppress autoimmunity via IL-10 and TGF-beta "
         "secretion and CTLA-4 signalling."),
    ]
    return [Document(d, t, (b + " ") * 3) for d, t, b in topics[:n_docs]]


@pytest.fixture
def docs():
    return make_docs()


@pytest.fixture
def index(docs):
    return index_corpus(docs, ScriptedBackend(), chunk_size=200, overlap=40)


def random_unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def agent_responder(roles=EXAMPLE_ROLES, verdict="ACCEPT - relevant", answer="Answer: (A)",
                    distilled="PASS\nDistilled background.", expert=lambda role, req: f"{role} insight"):
    """Stateless responder that answers by prompt kind (safe for parallel runs)."""

    def respond(request):
        kind = request_kind(request)
        if kind == "recruiter":
            return roster_reply(roles)
        if kind == "expert":
            role = request.messages[0].content.split("You are a ", 1)[1].split(" (specialty", 1)[0]
            return expert(role, request)
        if kind == "summarizer":
            return "Running summary."
        if kind == "verifier":
            return distilled
        if kind == "judge":
            return verdict(request) if callable(verdict) else verdict
        return answer(request) if callable(answer) else answer

    return respond
