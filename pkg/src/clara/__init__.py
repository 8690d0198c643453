"""Cross-lingual reflective QA pipeline for multilingual ophthalmology questions."""

from .core_model import (
    ABSTAIN,
    AnswerOutcome,
    BenchmarkSet,
    Category,
    Language,
    QuestionItem,
    validate_benchmark,
)
from .embedding_index import HashingEmbedder, Snippet, VectorIndex, chunk_document, cosine_sim, top_k
from .harness import MethodSpec, accuracy, gap_vs_english, run_method
from .llm_gateway import ChatMessage, CompletionParams, LLMGateway, ScriptedBackend
from .pipeline import ClaraPipeline, PipelineConfig, PipelineTrace, Ports, run_pipeline
from .relevance import RetrievalMode, rank_with_addon, reweighted_relevance, weighted_relevance

__version__ = "0.1.0"
