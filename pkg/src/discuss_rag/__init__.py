"""Discuss-RAG: agent-led retrieval-augmented QA with a query-only baseline."""

__version__ = "0.1.0"

from .bench import RunReport, evaluate, render_table, sweep_k
from .discussion import (
    AgentProfile,
    DiscussionConfig,
    DiscussionTranscript,
    DistilledSummary,
    Insight,
    RoundSummary,
    recruit,
    run_discussion,
    verify_summary,
)
from .gateway import (
    ChatCompletion,
    ChatRequest,
    FixtureEntry,
    HashingEmbedder,
    Message,
    OpenAICompatBackend,
    ScriptedBackend,
)
from .index import (
    Chunk,
    Document,
    Snippet,
    VectorIndex,
    build_index,
    chunk_document,
    index_corpus,
    load_index,
    retrieve_top_k,
    save_index,
)
from .pipeline import PipelineConfig, PipelineTrace, answer_query, build_retrieval_text
from .query import Query, extract_choice, load_dataset
from .verification import Answer, RetrievalVerdict, answer_with_context, answer_with_cot, judge_snippets
from .estimator import DiscussRAGClassifier
