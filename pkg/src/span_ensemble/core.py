"""Per-round span selection and the outer generation loop.

Each round is a two-phase fan-out/fan-in: every pool model greedily
generates a candidate span from the shared prefix, then every model
scores every candidate span (its own included) by perplexity. Outlier
scores are filtered per span, the span with the lowest kept-mean
perplexity wins, and the winner is appended to the prefix for the next
round. Aggregation is sequential, pure, and ordered by model index, so
results are identical regardless of scheduling.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .backends import Backend, EnsemblePool
from .errors import BackendError, NoEligibleSpanError, RoundError
from .types import (
    EnsembleConfig,
    FilterResult,
    RoundResult,
    RoundTimings,
    ScoreMatrix,
    SpanCandidate,
    Transcript,
)

logger = logging.getLogger(__name__)


def compute_perplexity(token_logprobs: Sequence[float]) -> float | None:
    """exp(-mean(log p)) over a span's token log-probabilities.

    Returns None (the invalid-score marker) for an empty list: an empty
    span has no perplexity under any scorer. Non-finite entries are a
    scoring error.
    """
    logprobs = list(token_logprobs)
    if not logprobs:
        return None
    if any(not math.isfinite(lp) for lp in logprobs):
        raise ValueError("token logprobs must be finite")
    return math.exp(-math.fsum(logprobs) / len(logprobs))


def filter_scores(
    column: Iterable[tuple[int, float]], lam: float, *, span_index: int = 0
) -> FilterResult:
    """Outlier filter for one span's scores.

    ``column`` holds (scorer_index, perplexity) pairs for the scorers with
    a valid entry. When max/min strictly exceeds ``lam`` the argmax and
    argmin scorers are removed, ties broken toward the lowest scorer
    index. Degenerate cases keep the kept set non-empty: an all-equal
    column never triggers, and with fewer than three valid scores nothing
    is removed even when the ratio condition fires.
    """
    if not math.isfinite(lam) or lam < 0:
        raise ValueError("lam must be a finite value >= 0")
    entries = sorted(column)
    if not entries:
        raise NoEligibleSpanError(f"span {span_index} has no valid scores")
    max_index, max_value = entries[0]
    min_index, min_value = entries[0]
    for scorer, value in entries[1:]:
        if value > max_value:
            max_index, max_value = scorer, value
        if value < min_value:
            min_index, min_value = scorer, value
    if min_value <= 0:
        raise ValueError("perplexities must be positive")
    triggered = max_value > min_value and (max_value / min_value) > lam
    if triggered and len(entries) >= 3:
        removed = frozenset((max_index, min_index))
        kept = frozenset(scorer for scorer, _ in entries) - removed
        return FilterResult(span_index=span_index, removed=removed, kept=kept, triggered=True)
    return FilterResult(
        span_index=span_index,
        removed=frozenset(),
        kept=frozenset(scorer for scorer, _ in entries),
        triggered=triggered,
    )


def select_span(
    matrix: ScoreMatrix,
    filters: Sequence[FilterResult],
    candidates: Sequence[SpanCandidate | None],
) -> tuple[int, float]:
    """Argmin over spans of the mean perplexity across kept scorers.

    Spans without a single kept score are ineligible; ties go to the
    lowest producer index.
    """
    if len(filters) != len(candidates):
        raise ValueError("filters and candidates must align")
    winner_index: int | None = None
    winner_mean = math.inf
    for decision in sorted(filters, key=lambda f: f.span_index):
        if not decision.kept:
            continue
        values = [matrix.ppl[i][decision.span_index] for i in sorted(decision.kept)]
        if any(v is None for v in values):
            raise ValueError(
                f"kept scorer set of span {decision.span_index} references invalid entries"
            )
        mean = math.fsum(values) / len(values)
        if mean < winner_mean:
            winner_index = decision.span_index
            winner_mean = mean
    if winner_index is None:
        raise NoEligibleSpanError("no candidate span has a valid score")
    return winner_index, winner_mean


def _score_entry(backend: Backend, prefix: str, continuation: str) -> float:
    ppl = compute_perplexity([ts.logprob for ts in backend.score(prefix, continuation)])
    if ppl is None or not math.isfinite(ppl) or ppl <= 0:
        raise ValueError(f"invalid perplexity {ppl!r}")
    return ppl


def ensemble_round(
    pool: EnsemblePool,
    prefix: str,
    config: EnsembleConfig,
    *,
    executor: ThreadPoolExecutor | None = None,
    workers: int | None = None,
) -> RoundResult:
    """One generate / mutually-score / filter / select round.

    A generation failure marks that candidate absent (whole column
    invalid) but the model still scores the others; a scoring failure
    invalidates only that entry. Every generation failing is a round
    error.
    """
    if not prefix:
        raise ValueError("prefix must be non-empty")
    own_executor: ThreadPoolExecutor | None = None
    if executor is None:
        own_executor = executor = ThreadPoolExecutor(
            max_workers=workers or max(pool.n_models, 1)
        )
    try:
        n = pool.n_models
        started = time.perf_counter()
        generation_futures = [
            executor.submit(backend.generate_span, prefix, config.span_length_words, j)
            for j, backend in enumerate(pool.models)
        ]
        candidates: list[SpanCandidate | None] = []
        for j, future in enumerate(generation_futures):
            try:
                candidates.append(future.result())
            except BackendError as exc:
                logger.warning(
                    "generation failed for model %d (%s): %s", j, pool.models[j].name, exc
                )
                candidates.append(None)
        if all(candidate is None for candidate in candidates):
            raise RoundError("all generation calls failed")
        generated_at = time.perf_counter()

        scoring_futures = {}
        for i, backend in enumerate(pool.models):
            for j, candidate in enumerate(candidates):
                if candidate is not None and candidate.word_count > 0:
                    scoring_futures[(i, j)] = executor.submit(
                        _score_entry, backend, prefix, candidate.text
                    )
        rows: list[list[float | None]] = [[None] * n for _ in range(n)]
        for (i, j), future in scoring_futures.items():
            try:
                rows[i][j] = future.result()
            except (BackendError, ValueError, OverflowError) as exc:
                logger.warning(
                    "scoring failed: model %d (%s) on span %d: %s",
                    i, pool.models[i].name, j, exc,
                )
        matrix = ScoreMatrix(n_models=n, ppl=tuple(tuple(row) for row in rows))
        scored_at = time.perf_counter()

        filters: list[FilterResult] = []
        for j in range(n):
            column = matrix.column(j)
            if not column:
                filters.append(
                    FilterResult(span_index=j, removed=frozenset(), kept=frozenset(), triggered=False)
                )
            elif config.filter_enabled and n >= 2:
                filters.append(filter_scores(column, config.lam, span_index=j))
            else:
                filters.append(
                    FilterResult(
                        span_index=j,
                        removed=frozenset(),
                        kept=frozenset(scorer for scorer, _ in column),
                        triggered=False,
                    )
                )
        winner_index, winner_mean = select_span(matrix, filters, candidates)
        done_at = time.perf_counter()

        return RoundResult(
            candidates=tuple(candidates),
            matrix=matrix,
            filters=tuple(filters),
            winner_index=winner_index,
            winner_mean_ppl=winner_mean,
            timings=RoundTimings(
                generation_ms=(generated_at - started) * 1000.0,
                scoring_ms=(scored_at - generated_at) * 1000.0,
                selection_ms=(done_at - scored_at) * 1000.0,
            ),
        )
    finally:
        if own_executor is not None:
            own_executor.shutdown()


def generate(
    pool: EnsemblePool,
    prompt: str,
    config: EnsembleConfig,
    *,
    workers: int | None = None,
    retries: int = 0,
) -> Transcript:
    """Run ensemble rounds, appending each winning span to the shared
    prefix, until the winning span ends its sequence (eos), the word
    budget is exhausted (word_budget), or no span can be scored
    (all_empty).

    The budget is checked before each round and a round always appends its
    full winning span, so the output may overshoot by up to span length
    minus one words. Round errors are retried ``retries`` times, then
    propagated.
    """
    if not prompt:
        raise ValueError("prompt must be non-empty")
    parts: list[str] = []
    rounds: list[RoundResult] = []
    words = 0
    with ThreadPoolExecutor(max_workers=workers or max(pool.n_models, 1)) as executor:
        while True:
            if words >= config.max_total_words:
                stop_reason = "word_budget"
                break
            prefix = prompt + "".join(parts)
            try:
                round_result = _round_with_retries(pool, prefix, config, executor, retries)
            except NoEligibleSpanError:
                stop_reason = "all_empty"
                break
            rounds.append(round_result)
            winner = round_result.candidates[round_result.winner_index]
            parts.append(winner.text)
            words += winner.word_count
            if winner.finished:
                stop_reason = "eos"
                break
    return Transcript(
        prompt=prompt,
        rounds=tuple(rounds),
        final_text="".join(parts),
        stop_reason=stop_reason,
    )


def _round_with_retries(
    pool: EnsemblePool,
    prefix: str,
    config: EnsembleConfig,
    executor: ThreadPoolExecutor,
    retries: int,
) -> RoundResult:
    attempts = retries + 1
    for attempt in range(1, attempts + 1):
        try:
            return ensemble_round(pool, prefix, config, executor=executor)
        except RoundError:
            if attempt == attempts:
                raise
            logger.warning("round failed (attempt %d/%d); retrying", attempt, attempts)
    raise AssertionError("unreachable")


def transcript_lines(transcript: Transcript) -> list[str]:
    """Serialize a transcript as JSONL: one object per round plus a final
    summary line."""
    lines = []
    for round_index, rr in enumerate(transcript.rounds):
        lines.append(
            json.dumps(
                {
                    "round": round_index,
                    "candidates": [
                        None
                        if candidate is None
                        else {
                            "producer": candidate.producer_index,
                            "text": candidate.text,
                            "word_count": candidate.word_count,
                            "finished": candidate.finished,
                        }
                        for candidate in rr.candidates
                    ],
                    "matrix": [list(row) for row in rr.matrix.ppl],
                    "filters": [
                        {
                            "span": decision.span_index,
                            "removed": sorted(decision.removed),
                            "kept": sorted(decision.kept),
                            "triggered": decision.triggered,
                        }
                        for decision in rr.filters
                    ],
                    "winner": rr.winner_index,
                    "winner_mean_ppl": rr.winner_mean_ppl,
                    "timings_ms": {
                        "generation": round(rr.timings.generation_ms, 3),
                        "scoring": round(rr.timings.scoring_ms, 3),
                        "selection": round(rr.timings.selection_ms, 3),
                    },
                },
                ensure_ascii=False,
            )
        )
    lines.append(
        json.dumps(
            {
                "final_text": transcript.final_text,
                "stop_reason": transcript.stop_reason,
                "total_rounds": len(transcript.rounds),
            },
            ensure_ascii=False,
        )
    )
    return lines


def write_transcript(transcript: Transcript, path: str | Path) -> None:
    Path(path).write_text("\n".join(transcript_lines(transcript)) + "\n", encoding="utf-8")
