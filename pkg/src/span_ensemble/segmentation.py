"""Word-boundary segmentation.

A word is a maximal run of non-whitespace characters; any Unicode
whitespace (including tabs and newlines) separates words. Spans never end
inside a word: the final word of a span must be confirmed by a following
whitespace character or by end-of-sequence. Leading whitespace belongs to
the span, trailing whitespace does not, so prefix + span concatenation is
character-exact.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class WordSpan:
    """A word-boundary-aligned prefix of some text."""

    text: str
    word_count: int
    complete: bool


def count_words(text: str) -> int:
    """Number of maximal non-whitespace runs in ``text``."""
    return len(text.split())


def truncate_to_words(text: str, limit: int) -> WordSpan:
    """Shortest prefix of ``text`` containing ``min(limit, count_words(text))``
    complete words.

    The prefix ends at the final character of its last word: leading and
    internal whitespace are preserved verbatim, trailing whitespace is
    excluded (it belongs to whatever follows the span).
    """
    if limit < 1:
        raise ValueError("word limit must be >= 1")
    words = 0
    cut = 0
    in_word = False
    for i, ch in enumerate(text):
        if ch.isspace():
            if in_word:
                in_word = False
                words += 1
                if words >= limit:
                    break
        else:
            in_word = True
            cut = i + 1
    else:
        if in_word:
            words += 1
    return WordSpan(text=text[:cut], word_count=words, complete=True)


class Segmenter:
    """Incremental word counter for streaming generation.

    Feed decoded text increments as they arrive; the segmenter reports when
    ``limit`` words have been confirmed. A word is confirmed by the first
    whitespace character after it, or by end-of-sequence (``finish``), so a
    streaming producer must emit at least one character past the span before
    the span can be cut. Single-owner mutable state: use one segmenter per
    stream.
    """

    def __init__(self, limit: int):
        if limit < 1:
            raise ValueError("word limit must be >= 1")
        self.limit = limit
        self.confirmed_words = 0
        self.in_word = False
        self.reached = False
        self._parts: list[str] = []

    @property
    def buffered_text(self) -> str:
        return "".join(self._parts)

    def feed(self, chunk: str) -> bool:
        """Consume the next text increment.

        Returns True once ``limit`` words are confirmed; afterwards further
        chunks are ignored (the span is already determined).
        """
        if self.reached:
            return True
        self._parts.append(chunk)
        for ch in chunk:
            if ch.isspace():
                if self.in_word:
                    self.in_word = False
                    self.confirmed_words += 1
                    if self.confirmed_words >= self.limit:
                        self.reached = True
                        break
            else:
                self.in_word = True
        return self.reached

    def finish(self) -> WordSpan:
        """Signal end-of-sequence (confirms any pending word) and return the
        final span."""
        if not self.reached and self.in_word:
            self.in_word = False
            self.confirmed_words += 1
            if self.confirmed_words >= self.limit:
                self.reached = True
        return self.span()

    def span(self) -> WordSpan:
        """Word-boundary truncation of the confirmed part of the stream."""
        n = min(self.confirmed_words, self.limit)
        if n == 0:
            return WordSpan(text="", word_count=0, complete=True)
        return truncate_to_words(self.buffered_text, n)
