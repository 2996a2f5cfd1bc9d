"""scikit-learn style facade: ``fit`` indexes a corpus, ``predict`` answers queries."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bench import evaluate
from .discussion import DiscussionConfig
from .errors import PipelineError
from .index import DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP, Document, index_corpus
from .pipeline import PipelineConfig, PipelineTrace, answer_query
from .query import Query
from .templates import PromptTemplates


def _check_documents(X) -> list[Document]:
    docs = []
    for item in X:
        if isinstance(item, Document):
            docs.append(item)
        elif isinstance(item, dict):
            docs.append(Document(str(item["doc_id"]), str(item.get("title", "")), item["body"]))
        else:
            raise TypeError(f"expected Document or mapping, got {type(item).__name__}")
    if not docs:
        raise ValueError("fit() needs at least one document")
    if len({d.doc_id for d in docs}) != len(docs):
        raise ValueError("doc_id values must be unique")
    return docs


def _check_queries(X) -> list[Query]:
    queries = list(X)
    for q in queries:
        if not isinstance(q, Query):
            raise TypeError(f"expected Query, got {type(q).__name__}")
    return queries


class DiscussRAGClassifier(BaseEstimator):
    """Answers QA items by retrieval over the corpus seen in ``fit``.

    ``gateway`` is any backend with ``complete``/``embed`` (live or scripted).
    Predictions for queries whose pipeline failed are ``None``.
    """

    def __init__(self, gateway=None, mode="discuss_rag", k=5, n_experts=3, m_rounds=3,
                 model_id="", chunk_size=DEFAULT_CHUNK_SIZE, overlap=DEFAULT_OVERLAP,
                 template_dir=None):
        self.gateway = gateway
        self.mode = mode
        self.k = k
        self.n_experts = n_experts
        self.m_rounds = m_rounds
        self.model_id = model_id
        self.chunk_size = chunk_size
        self.overlap = overlap
        self.template_dir = template_dir

    def _config(self) -> PipelineConfig:
        return PipelineConfig(self.mode, self.k, DiscussionConfig(self.n_experts, self.m_rounds),
                              self.model_id, self.template_dir)

    def fit(self, X: Iterable, y=None):
        if self.gateway is None:
            raise ValueError("a gateway is required")
        self._config()  # validate hyper-parameters early
        self.index_ = index_corpus(_check_documents(X), self.gateway, self.chunk_size, self.overlap)
        self.templates_ = PromptTemplates.load(self.template_dir)
        return self

    def predict_trace(self, X: Sequence[Query]) -> list[PipelineTrace]:
        check_is_fitted(self, "index_")
        traces = []
        for q in _check_queries(X):
            try:
                _, trace = answer_query(q, self._config(), self.index_, self.gateway,
                                        templates=self.templates_)
            except PipelineError as exc:
                trace = exc.trace
            traces.append(trace)
        return traces

    def predict(self, X: Sequence[Query]) -> np.ndarray:
        return np.array([t.answer.choice if t.answer else None for t in self.predict_trace(X)],
                        dtype=object)

    def score(self, X: Sequence[Query], y=None) -> float:
        """Accuracy over ``X`` (gold labels from the queries unless ``y`` is given)."""
        check_is_fitted(self, "index_")
        queries = _check_queries(X)
        if y is not None:
            queries = [Query(q.query_id, q.stem, q.options, str(g), q.dataset) for q, g in zip(queries, y)]
        report = evaluate(queries, self._config(), self.index_, self.gateway, templates=self.templates_)
        return float("nan") if report.accuracy is None else report.accuracy
