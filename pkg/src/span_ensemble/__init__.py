"""Span-level ensemble decoding for pools of language models.

Per round, every pool model greedily generates a fixed-word-length span
from the shared prefix; all models score all candidate spans by
perplexity; outlier scores are filtered by a ratio threshold; the span
with the lowest kept-mean perplexity is appended to the prefix.
"""

from .backends import (
    Backend,
    EnsemblePool,
    HttpBackend,
    HttpBackendConfig,
    TableLM,
    load_pool,
)
from .core import (
    compute_perplexity,
    ensemble_round,
    filter_scores,
    generate,
    select_span,
    transcript_lines,
    write_transcript,
)
from .errors import (
    BackendError,
    DatasetError,
    NoEligibleSpanError,
    PoolConfigError,
    RoundError,
    ScoringUnsupportedError,
    SpanEnsembleError,
)
from .harness import (
    EvalExample,
    EvalReport,
    SweepSpec,
    load_dataset,
    run_eval,
    run_sweep,
    sweep_csv,
    write_sweep_csv,
)
from .metrics import (
    corpus_bleu,
    exact_match,
    extract_numeric_answer,
    normalize_answer,
    numeric_match,
    sentence_bleu,
)
from .segmentation import Segmenter, WordSpan, count_words, truncate_to_words
from .types import (
    EnsembleConfig,
    FilterResult,
    RoundResult,
    RoundTimings,
    ScoreMatrix,
    SpanCandidate,
    TokenScore,
    Transcript,
)

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "BackendError",
    "DatasetError",
    "EnsembleConfig",
    "EnsemblePool",
    "EvalExample",
    "EvalReport",
    "FilterResult",
    "HttpBackend",
    "HttpBackendConfig",
    "NoEligibleSpanError",
    "PoolConfigError",
    "RoundError",
    "RoundResult",
    "RoundTimings",
    "ScoreMatrix",
    "ScoringUnsupportedError",
    "Segmenter",
    "SpanCandidate",
    "SpanEnsembleError",
    "SweepSpec",
    "TableLM",
    "TokenScore",
    "Transcript",
    "WordSpan",
    "compute_perplexity",
    "corpus_bleu",
    "count_words",
    "ensemble_round",
    "exact_match",
    "extract_numeric_answer",
    "filter_scores",
    "generate",
    "load_dataset",
    "load_pool",
    "normalize_answer",
    "numeric_match",
    "run_eval",
    "run_sweep",
    "select_span",
    "sentence_bleu",
    "sweep_csv",
    "transcript_lines",
    "truncate_to_words",
    "write_sweep_csv",
    "write_transcript",
]
