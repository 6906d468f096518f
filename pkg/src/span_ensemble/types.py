"""Immutable record types shared across the engine.

Everything here is frozen and safe to share across concurrent workers;
ordering of models/spans is always by pool index, never by completion
order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

STOP_REASONS = ("eos", "word_budget", "all_empty")


@dataclass(frozen=True)
class EnsembleConfig:
    """Knobs for one ensemble generation run.

    ``lam`` is the outlier ratio threshold: a span's scores are filtered
    when max/min strictly exceeds it. 0 is the most aggressive setting
    (any spread beyond equality triggers).
    """

    span_length_words: int = 4
    lam: float = 10.0
    filter_enabled: bool = True
    max_total_words: int = 256
    seed_tiebreak: str = "lowest-model-index"

    def __post_init__(self) -> None:
        if self.span_length_words < 1:
            raise ValueError("span_length_words must be >= 1")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lam must be a finite value >= 0")
        if self.max_total_words < self.span_length_words:
            raise ValueError("max_total_words must be >= span_length_words")
        if self.seed_tiebreak != "lowest-model-index":
            raise ValueError("the only supported tie-break rule is 'lowest-model-index'")


@dataclass(frozen=True)
class TokenScore:
    """One token of a scored continuation with its natural-log probability."""

    token_text: str
    logprob: float


@dataclass(frozen=True)
class SpanCandidate:
    """One model's proposed continuation for a round.

    ``text`` continues the shared prefix verbatim (leading whitespace
    included) and never ends inside a word. ``finished`` means the model
    emitted end-of-sequence while producing this span.
    """

    producer_index: int
    text: str
    word_count: int
    finished: bool


@dataclass(frozen=True)
class ScoreMatrix:
    """N x N perplexities; ``ppl[i][j]`` is scorer i's perplexity of span j.

    ``None`` marks an invalid entry: an empty or failed candidate (whole
    column) or a single failed scoring call.
    """

    n_models: int
    ppl: tuple[tuple[float | None, ...], ...]

    def __post_init__(self) -> None:
        if len(self.ppl) != self.n_models or any(len(row) != self.n_models for row in self.ppl):
            raise ValueError("ppl must be an n_models x n_models grid")

    def column(self, span_index: int) -> list[tuple[int, float]]:
        """Valid (scorer_index, perplexity) pairs for one span, in scorer order."""
        return [
            (i, row[span_index])
            for i, row in enumerate(self.ppl)
            if row[span_index] is not None
        ]


@dataclass(frozen=True)
class FilterResult:
    """Outlier-filter outcome for one span: removed and kept scorer sets."""

    span_index: int
    removed: frozenset[int]
    kept: frozenset[int]
    triggered: bool


@dataclass(frozen=True)
class RoundTimings:
    """Wall-clock durations of the round phases, in milliseconds."""

    generation_ms: float
    scoring_ms: float
    selection_ms: float


@dataclass(frozen=True)
class RoundResult:
    """Everything one round produced: candidates (None = failed generation),
    the score matrix, per-span filter decisions, and the winner."""

    candidates: tuple[SpanCandidate | None, ...]
    matrix: ScoreMatrix
    filters: tuple[FilterResult, ...]
    winner_index: int
    winner_mean_ppl: float
    timings: RoundTimings


@dataclass(frozen=True)
class Transcript:
    """Ordered record of a full generation run."""

    prompt: str
    rounds: tuple[RoundResult, ...]
    final_text: str
    stop_reason: str

    def __post_init__(self) -> None:
        if self.stop_reason not in STOP_REASONS:
            raise ValueError(f"stop_reason must be one of {STOP_REASONS}")
