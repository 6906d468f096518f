"""Task metrics: exact match, last-number accuracy, corpus BLEU."""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from collections.abc import Sequence

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_NUMBER_RE = re.compile(r"[-+]?\d+(?:,\d{3})*(?:\.\d+)?")


def normalize_answer(text: str) -> str:
    """Lowercase, drop ASCII punctuation, collapse whitespace runs, strip."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def exact_match(prediction: str, references: Sequence[str]) -> bool:
    """True iff the normalized prediction equals any normalized reference."""
    normalized = normalize_answer(prediction)
    return any(normalized == normalize_answer(ref) for ref in references)


def extract_numeric_answer(text: str) -> float | None:
    """The last number in ``text`` (optional sign, thousands commas,
    decimal point), or None if there is none."""
    matches = _NUMBER_RE.findall(text)
    if not matches:
        return None
    return float(matches[-1].replace(",", ""))


def numeric_match(prediction: str, references: Sequence[str]) -> bool:
    """True iff the prediction's last number equals any reference number."""
    value = extract_numeric_answer(prediction)
    if value is None:
        return False
    for ref in references:
        try:
            target = float(ref.replace(",", ""))
        except ValueError:
            continue
        if math.isclose(value, target, rel_tol=1e-9, abs_tol=1e-9):
            return True
    return False


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(
    hypotheses: Sequence[str],
    reference_lists: Sequence[Sequence[str]],
    max_n: int = 4,
) -> float:
    """Corpus BLEU in [0, 100] on lowercased whitespace tokens.

    Geometric mean of modified n-gram precisions (n = 1..max_n, counts
    clipped to the best reference) times the brevity penalty
    exp(1 - ref_len/hyp_len) when the hypothesis side is shorter; the
    effective reference length is the closest to each hypothesis (shorter
    wins ties). No smoothing: any zero precision numerator gives 0.
    """
    if len(hypotheses) != len(reference_lists):
        raise ValueError("hypotheses and reference lists must have equal length")
    if not hypotheses:
        raise ValueError("corpus is empty")
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hypothesis, references in zip(hypotheses, reference_lists):
        if not references:
            raise ValueError("every hypothesis needs at least one reference")
        hyp_tokens = hypothesis.lower().split()
        ref_token_lists = [ref.lower().split() for ref in references]
        hyp_len += len(hyp_tokens)
        ref_len += min(
            (len(ref) for ref in ref_token_lists),
            key=lambda length: (abs(length - len(hyp_tokens)), length),
        )
        for n in range(1, max_n + 1):
            hyp_counts = _ngram_counts(hyp_tokens, n)
            if not hyp_counts:
                continue
            total[n - 1] += sum(hyp_counts.values())
            best_ref_counts: Counter = Counter()
            for ref_tokens in ref_token_lists:
                for gram, count in _ngram_counts(ref_tokens, n).items():
                    if count > best_ref_counts[gram]:
                        best_ref_counts[gram] = count
            matched[n - 1] += sum(
                min(count, best_ref_counts[gram]) for gram, count in hyp_counts.items()
            )
    if hyp_len == 0 or any(t == 0 for t in total) or any(m == 0 for m in matched):
        return 0.0
    log_precision_sum = math.fsum(math.log(m / t) for m, t in zip(matched, total))
    brevity = math.exp(1.0 - ref_len / hyp_len) if hyp_len < ref_len else 1.0
    return 100.0 * brevity * math.exp(log_precision_sum / max_n)


def sentence_bleu(hypothesis: str, references: Sequence[str], max_n: int = 4) -> float:
    """Single-sentence convenience wrapper around :func:`corpus_bleu`."""
    return corpus_bleu([hypothesis], [references], max_n=max_n)
