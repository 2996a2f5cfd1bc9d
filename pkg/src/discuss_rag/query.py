"""QA items, dataset loaders and answer-label extraction.

Per-dataset field mapping (one JSON object per line):

=========  ================================================================
kind       fields
=========  ================================================================
mmlu_med   ``id``, ``question``, ``options`` (label -> text), ``answer``
medqa_us   same as mmlu_med; ``answer_idx`` wins over ``answer`` when present,
           and an ``answer`` equal to an option's text maps to its label
pubmedqa   ``id`` or ``PMID``, ``question``, ``final_decision`` or ``answer``
           in {yes, no, maybe}
bioasq     ``id``, ``question`` or ``body``, ``exact_answer`` or ``answer``
           in {yes, no}
custom     ``id``, ``question``, ``options`` (mapping, or list labelled A, B, ...),
           ``answer``
=========  ================================================================

For pubmedqa/bioasq a lettered ``options`` mapping (``{"A": "yes", ...}``, as
shipped in MedRAG's benchmark file) is also accepted; letters are translated to
the option word.
"""
from __future__ import annotations

import json
import os
import re
import string
from dataclasses import dataclass

from .errors import DatasetFormatError, ParseFailure

DATASET_KINDS = ("mmlu_med", "medqa_us", "bioasq", "pubmedqa", "custom")
YES_NO = ("yes", "no")
YES_NO_MAYBE = ("yes", "no", "maybe")


@dataclass(frozen=True)
class Query:
    query_id: str
    stem: str
    options: tuple[tuple[str, str], ...]  # ordered (label, text)
    gold: str
    dataset: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "options", tuple((str(k), str(v)) for k, v in self.options))
        labels = self.labels
        if not labels:
            raise ValueError("a query needs at least one option")
        if len(set(labels)) != len(labels):
            raise ValueError("option labels must be unique")
        if self.gold not in labels:
            raise ValueError(f"gold label {self.gold!r} not among options {list(labels)}")
        if self.dataset not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.dataset!r}")

    @classmethod
    def multiple_choice(cls, query_id, stem, options: dict[str, str], gold, dataset="custom"):
        return cls(query_id, stem, tuple(options.items()), gold, dataset)

    @classmethod
    def yes_no(cls, query_id, stem, gold, maybe=True, dataset="custom"):
        words = YES_NO_MAYBE if maybe else YES_NO
        return cls(query_id, stem, tuple((w, w) for w in words), gold, dataset)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.options)

    @property
    def is_yes_no(self) -> bool:
        return set(self.labels) <= set(YES_NO_MAYBE)

    def options_block(self) -> str:
        if self.is_yes_no:
            return "Options: " + " / ".join(self.labels)
        return "\n".join(f"({label}) {text}" for label, text in self.options)

    def to_record(self) -> dict:
        return {"query_id": self.query_id, "stem": self.stem,
                "options": dict(self.options), "gold": self.gold, "dataset": self.dataset}


def _letter_options(raw) -> list[tuple[str, str]]:
    if isinstance(raw, dict):
        return [(str(k), str(v)) for k, v in raw.items()]
    if isinstance(raw, list):
        return [(string.ascii_uppercase[i], str(v)) for i, v in enumerate(raw)]
    raise ValueError("options must be a mapping or a list")


def _word_gold(rec: dict, fields: tuple[str, ...], words: tuple[str, ...]) -> str:
    for f in fields:
        if f in rec:
            val = rec[f]
            if isinstance(val, list):  # BioASQ exact_answer is sometimes a 1-list
                val = val[0] if val else ""
            val = str(val).strip()
            opts = rec.get("options")
            if isinstance(opts, dict) and val in opts:
                val = str(opts[val])
            return val.lower()
    raise KeyError(f"none of {fields}")


def _record_to_query(rec: dict, kind: str, lineno: int) -> Query:
    qid = str(rec.get("id", rec.get("PMID", rec.get("query_id", f"line{lineno}"))))
    if kind in ("mmlu_med", "medqa_us", "custom"):
        stem = rec["question"]
        options = _letter_options(rec["options"])
        gold = rec.get("answer_idx", rec.get("answer"))
        if gold is None:
            raise KeyError("answer")
        gold = str(gold).strip()
        labels = [label for label, _ in options]
        if gold not in labels:
            by_text = [label for label, text in options if text.strip() == gold]
            if by_text:
                gold = by_text[0]
        return Query(qid, stem, tuple(options), gold, kind)
    if kind == "pubmedqa":
        gold = _word_gold(rec, ("final_decision", "answer"), YES_NO_MAYBE)
        return Query.yes_no(qid, rec["question"], gold, maybe=True, dataset=kind)
    if kind == "bioasq":
        gold = _word_gold(rec, ("exact_answer", "answer"), YES_NO)
        return Query.yes_no(qid, rec.get("question", rec.get("body")), gold, maybe=False, dataset=kind)
    raise ValueError(f"unknown dataset kind {kind!r}")


def load_dataset(path: str | os.PathLike, dataset_kind: str) -> list[Query]:
    """Parse a JSON-lines dataset; every malformed line is reported together."""
    if dataset_kind not in DATASET_KINDS:
        raise DatasetFormatError(f"unknown dataset kind {dataset_kind!r}")
    queries: list[Query] = []
    problems: list[tuple[int, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not an object")
                q = _record_to_query(rec, dataset_kind, lineno)
                if not q.stem or not str(q.stem).strip():
                    raise ValueError("empty question")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                problems.append((lineno, f"{type(exc).__name__}: {exc}"))
                continue
            if q.query_id in seen:
                problems.append((lineno, f"duplicate id {q.query_id!r}"))
                continue
            seen.add(q.query_id)
            queries.append(q)
    if problems:
        detail = "; ".join(f"line {n}: {msg}" for n, msg in problems)
        raise DatasetFormatError(f"{path}: {len(problems)} malformed record(s): {detail}", problems)
    return queries


_ANSWER_RE = re.compile(r"answer\s*(?:is)?\s*[:：]\s*\(?\s*([A-Za-z]+)\s*\)?", re.IGNORECASE)
_LINE_RE = re.compile(r"^\W*\(?([A-Za-z]+)\)?\W*$")


def _resolve(token: str, query: Query) -> str | None:
    labels = query.labels
    if token in labels:
        return token
    if query.is_yes_no:
        low = token.lower()
        return low if low in labels else None
    up = token.upper()
    return up if len(token) == 1 and up in labels else None


def extract_choice(raw: str, query: Query) -> str:
    """Pull the predicted label out of a generation.

    Cascade: last ``Answer: (X)`` / ``Answer: X``; else the last line holding
    only a label; else, for yes/no(/maybe) sets, the last standalone label
    word. Raises ParseFailure when all three miss.
    """
    for m in reversed(list(_ANSWER_RE.finditer(raw))):
        label = _resolve(m.group(1), query)
        if label is not None:
            return label
    for line in reversed(raw.splitlines()):
        m = _LINE_RE.match(line.strip())
        if m:
            label = _resolve(m.group(1), query)
            if label is not None:
                return label
    if query.is_yes_no:
        words = "|".join(map(re.escape, query.labels))
        hits = re.findall(rf"\b({words})\b", raw, re.IGNORECASE)
        if hits:
            return hits[-1].lower()
    raise ParseFailure(f"no valid label in generation for {query.query_id!r}")
