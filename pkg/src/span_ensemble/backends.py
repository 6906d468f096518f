"""Model backends behind one contract: greedy span generation and
per-token logprob scoring.

Two implementations ship: a deterministic table-driven n-gram LM (the
exact oracle used throughout the test suite) and an HTTP client for
OpenAI-style completions servers. Backends are immutable after
construction / stateless per request, so a pool can be fanned out across
worker threads freely; determinism comes from index-ordered aggregation
upstream, never from scheduling.
"""

from __future__ import annotations

import json
import math
import os
import threading
from abc import ABC, abstractmethod
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import httpx

from .errors import BackendError, PoolConfigError, ScoringUnsupportedError
from .segmentation import Segmenter
from .types import SpanCandidate, TokenScore

_DIST_SUM_TOLERANCE = 1e-9


class Backend(ABC):
    """One candidate model: generates greedy continuations and scores
    continuations token-by-token under its own tokenization."""

    name: str = "backend"
    supports_scoring: bool = True

    @abstractmethod
    def stream_text(self, prefix: str) -> Iterator[str]:
        """Greedy continuation of ``prefix`` as decoded text increments.

        The iterator is exhausted exactly at end-of-sequence; callers may
        stop consuming early once they have enough words.
        """

    @abstractmethod
    def score(self, prefix: str, continuation: str) -> list[TokenScore]:
        """Natural-log probabilities of ``continuation`` conditioned on
        ``prefix``, one entry per token of this backend's own tokenization.

        The concatenated ``token_text`` values equal ``continuation``
        exactly; anything else is a backend error, never silent data.
        """

    def generate_span(self, prefix: str, span_words: int, producer_index: int = 0) -> SpanCandidate:
        """Stream a greedy continuation until ``span_words`` complete words
        are confirmed or the model ends its sequence."""
        seg = Segmenter(span_words)
        # Runaway guard: a model that never produces a word boundary
        # (e.g. a whitespace-only loop) must fail loudly, not spin.
        char_cap = 4096 + 256 * span_words
        consumed = 0
        finished = True
        for piece in self.stream_text(prefix):
            consumed += len(piece)
            if seg.feed(piece):
                finished = False
                break
            if consumed > char_cap:
                raise BackendError(
                    f"no {span_words}-word span boundary within {consumed} characters",
                    model=self.name,
                )
        span = seg.finish()
        return SpanCandidate(
            producer_index=producer_index,
            text=span.text,
            word_count=span.word_count,
            finished=finished,
        )


class TableLM(Backend):
    """Deterministic n-gram LM defined by explicit probability tables.

    ``transitions`` maps a context key (the last ``order`` tokens joined by
    ``CONTEXT_SEPARATOR``) to a next-token distribution, which may include
    ``eos_token``. Contexts absent from the table fall back to a uniform
    distribution over the vocabulary. Text is tokenized by longest-match
    against the vocabulary; an unmatchable character inside a scored
    continuation is an error, while in the conditioning prefix it is
    skipped (the context lookup falls back to uniform anyway).
    """

    CONTEXT_SEPARATOR = "\x1f"

    def __init__(
        self,
        name: str,
        vocab: Sequence[str],
        transitions: Mapping[str, Mapping[str, float]],
        *,
        order: int = 1,
        eos_token: str = "<eos>",
    ):
        self.name = name
        self.vocab = tuple(vocab)
        self.transitions = {ctx: dict(dist) for ctx, dist in transitions.items()}
        self.order = order
        self.eos_token = eos_token
        self._validate()
        self._uniform_logprob = -math.log(len(self.vocab))
        # Greedy tie-break rank: vocabulary order, eos last.
        self._rank = {tok: r for r, tok in enumerate(self.vocab)}
        self._rank[eos_token] = len(self.vocab)
        by_first: dict[str, list[str]] = {}
        for tok in self.vocab:
            by_first.setdefault(tok[0], []).append(tok)
        self._by_first = {c: sorted(ts, key=len, reverse=True) for c, ts in by_first.items()}

    def _validate(self) -> None:
        if not self.vocab:
            raise ValueError(f"table {self.name!r}: vocabulary is empty")
        if any(not isinstance(t, str) or not t for t in self.vocab):
            raise ValueError(f"table {self.name!r}: vocabulary tokens must be non-empty strings")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError(f"table {self.name!r}: vocabulary has duplicate tokens")
        if self.order < 0:
            raise ValueError(f"table {self.name!r}: order must be >= 0")
        if not self.eos_token:
            raise ValueError(f"table {self.name!r}: eos token must be non-empty")
        if self.eos_token in self.vocab:
            raise ValueError(f"table {self.name!r}: eos token must not be in the vocabulary")
        allowed = set(self.vocab) | {self.eos_token}
        for ctx, dist in self.transitions.items():
            if not dist:
                raise ValueError(f"table {self.name!r}: empty distribution for context {ctx!r}")
            for tok, prob in dist.items():
                if tok not in allowed:
                    raise ValueError(
                        f"table {self.name!r}: context {ctx!r} assigns probability to "
                        f"unknown token {tok!r}"
                    )
                if not (isinstance(prob, (int, float)) and 0.0 < prob <= 1.0):
                    raise ValueError(
                        f"table {self.name!r}: probability of {tok!r} under {ctx!r} "
                        f"must be in (0, 1], got {prob!r}"
                    )
            total = math.fsum(dist.values())
            if abs(total - 1.0) > _DIST_SUM_TOLERANCE:
                raise ValueError(
                    f"table {self.name!r}: distribution for context {ctx!r} sums to {total!r}"
                )

    @classmethod
    def from_dict(cls, data: Mapping, name: str = "table") -> "TableLM":
        """Build from the table file schema:
        ``{"order", "vocab", "eos", "transitions", "fallback"}``."""
        if not isinstance(data, Mapping):
            raise ValueError(f"table {name!r}: expected a JSON object")
        missing = [key for key in ("vocab", "transitions") if key not in data]
        if missing:
            raise ValueError(f"table {name!r}: missing required fields {missing}")
        fallback = data.get("fallback", "uniform")
        if fallback != "uniform":
            raise ValueError(f"table {name!r}: unsupported fallback {fallback!r}")
        return cls(
            name=name,
            vocab=data["vocab"],
            transitions=data["transitions"],
            order=int(data.get("order", 1)),
            eos_token=data.get("eos", "<eos>"),
        )

    @classmethod
    def from_file(cls, path: str | Path, name: str | None = None) -> "TableLM":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"table file {path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data, name=name or path.stem)

    # -- tokenization -----------------------------------------------------

    def _match_at(self, text: str, pos: int) -> str | None:
        for tok in self._by_first.get(text[pos], ()):
            if text.startswith(tok, pos):
                return tok
        return None

    def tokenize(self, text: str) -> list[str]:
        """Longest-match tokenization; fails on text the vocabulary cannot cover."""
        tokens: list[str] = []
        pos = 0
        while pos < len(text):
            tok = self._match_at(text, pos)
            if tok is None:
                raise BackendError(
                    f"cannot tokenize {text[pos:pos + 16]!r} at offset {pos}",
                    model=self.name,
                )
            tokens.append(tok)
            pos += len(tok)
        return tokens

    def _context_tokens(self, text: str) -> list[str]:
        """Lenient tokenization for conditioning prefixes: unmatchable
        characters are skipped instead of failing."""
        tokens: list[str] = []
        pos = 0
        while pos < len(text):
            tok = self._match_at(text, pos)
            if tok is None:
                pos += 1
            else:
                tokens.append(tok)
                pos += len(tok)
        return tokens

    def _distribution(self, context: list[str]) -> dict[str, float] | None:
        key_tokens = context[-self.order:] if self.order > 0 else []
        return self.transitions.get(self.CONTEXT_SEPARATOR.join(key_tokens))

    # -- contract ----------------------------------------------------------

    def stream_text(self, prefix: str) -> Iterator[str]:
        context = self._context_tokens(prefix)
        while True:
            dist = self._distribution(context)
            if dist is None:
                # Uniform fallback: greedy means lowest vocabulary index.
                token = self.vocab[0]
            else:
                token = max(dist, key=lambda t: (dist[t], -self._rank[t]))
            if token == self.eos_token:
                return
            yield token
            context.append(token)

    def score(self, prefix: str, continuation: str) -> list[TokenScore]:
        if not continuation:
            raise ValueError("continuation must be non-empty")
        context = self._context_tokens(prefix)
        scores: list[TokenScore] = []
        for token in self.tokenize(continuation):
            dist = self._distribution(context)
            if dist is None:
                logprob = self._uniform_logprob
            else:
                prob = dist.get(token, 0.0)
                if prob <= 0.0:
                    raise BackendError(
                        f"zero probability for token {token!r}", model=self.name
                    )
                logprob = math.log(prob)
            scores.append(TokenScore(token_text=token, logprob=logprob))
            context.append(token)
        return scores


@dataclass(frozen=True)
class HttpBackendConfig:
    """Connection settings for a completions-API model server.

    ``base_url`` is the server root (the client appends /v1/completions).
    ``api_key_env`` names the environment variable holding the bearer
    token; keys are never written in pool files.
    """

    base_url: str
    model: str
    name: str = ""
    api_key_env: str | None = None
    timeout_s: float = 30.0
    max_tokens_per_request: int = 256
    supports_scoring: bool = True

    def __post_init__(self) -> None:
        if not self.base_url:
            raise ValueError("base_url must be non-empty")
        if not self.model:
            raise ValueError("model must be non-empty")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")
        if self.max_tokens_per_request < 1:
            raise ValueError("max_tokens_per_request must be >= 1")
        if not self.name:
            object.__setattr__(self, "name", self.model)


class HttpBackend(Backend):
    """Client for an OpenAI-style completions server (vLLM et al.).

    Generation posts echo=false, temperature 0 requests and keeps extending
    the prompt while the server reports finish_reason "length", so a span
    can cross the per-request token cap. Scoring posts two echo=true
    logprob requests (prefix and prefix+continuation) and takes the token
    scores after the longest common token-sequence prefix; if the joined
    suffix does not reproduce the continuation byte-for-byte, the tokenizer
    merged across the span boundary and the call fails rather than
    returning misaligned scores.
    """

    _ECHO_CACHE_SIZE = 8

    def __init__(self, config: HttpBackendConfig):
        self.config = config
        self.name = config.name
        self.supports_scoring = config.supports_scoring
        headers = {}
        if config.api_key_env:
            key = os.environ.get(config.api_key_env)
            if not key:
                raise PoolConfigError(
                    f"backend {config.name!r}: environment variable "
                    f"{config.api_key_env} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            headers=headers,
            timeout=config.timeout_s,
        )
        self._echo_cache: dict[str, tuple[list[str], list]] = {}
        self._cache_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def _completion(self, body: dict) -> dict:
        try:
            response = self._client.post("/v1/completions", json=body)
        except httpx.HTTPError as exc:
            raise BackendError(f"transport failure: {exc}", model=self.name) from exc
        if response.status_code != 200:
            raise BackendError(
                f"HTTP {response.status_code}: {response.text[:200]}", model=self.name
            )
        try:
            return response.json()["choices"][0]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed response: {exc}", model=self.name) from exc

    def stream_text(self, prefix: str) -> Iterator[str]:
        generated = ""
        while True:
            choice = self._completion(
                {
                    "model": self.config.model,
                    "prompt": prefix + generated,
                    "max_tokens": self.config.max_tokens_per_request,
                    "temperature": 0,
                    "logprobs": 1,
                    "echo": False,
                }
            )
            text = choice.get("text") or ""
            if text:
                yield text
                generated += text
            # Anything other than a length cut (or an empty continuation,
            # which cannot make progress) ends the sequence.
            if choice.get("finish_reason") != "length" or not text:
                return

    def _echo_logprobs(self, text: str, *, cache: bool) -> tuple[list[str], list]:
        if cache:
            with self._cache_lock:
                hit = self._echo_cache.get(text)
            if hit is not None:
                return hit
        choice = self._completion(
            {
                "model": self.config.model,
                "prompt": text,
                "max_tokens": 0,
                "temperature": 0,
                "logprobs": 1,
                "echo": True,
            }
        )
        logprobs = choice.get("logprobs") or {}
        tokens = logprobs.get("tokens")
        token_logprobs = logprobs.get("token_logprobs")
        if tokens is None or token_logprobs is None or len(tokens) != len(token_logprobs):
            raise ScoringUnsupportedError(
                "server did not return echo logprobs", model=self.name
            )
        result = (list(tokens), list(token_logprobs))
        if cache:
            with self._cache_lock:
                if len(self._echo_cache) >= self._ECHO_CACHE_SIZE:
                    self._echo_cache.pop(next(iter(self._echo_cache)))
                self._echo_cache[text] = result
        return result

    def score(self, prefix: str, continuation: str) -> list[TokenScore]:
        if not self.supports_scoring:
            raise ScoringUnsupportedError("scoring disabled for this backend", model=self.name)
        if not continuation:
            raise ValueError("continuation must be non-empty")
        # The prefix echo is cached: one round scores N spans under the
        # same prefix.
        prefix_tokens, _ = self._echo_logprobs(prefix, cache=True)
        full_tokens, full_logprobs = self._echo_logprobs(prefix + continuation, cache=False)
        common = 0
        while (
            common < len(prefix_tokens)
            and common < len(full_tokens)
            and prefix_tokens[common] == full_tokens[common]
        ):
            common += 1
        suffix_tokens = full_tokens[common:]
        suffix_logprobs = full_logprobs[common:]
        if "".join(suffix_tokens) != continuation:
            raise BackendError(
                "tokenizer merged across the span boundary; token scores "
                "cannot be aligned to the continuation",
                model=self.name,
            )
        scores: list[TokenScore] = []
        for token, logprob in zip(suffix_tokens, suffix_logprobs):
            if logprob is None or not math.isfinite(float(logprob)):
                raise BackendError(
                    f"missing or non-finite logprob for token {token!r}", model=self.name
                )
            scores.append(TokenScore(token_text=token, logprob=float(logprob)))
        return scores


@dataclass(frozen=True)
class EnsemblePool:
    """Ordered, index-stable collection of backends; the order in the pool
    config file fixes every model index for the life of a run."""

    models: tuple[Backend, ...]

    def __post_init__(self) -> None:
        if not self.models:
            raise ValueError("a pool needs at least one model")

    @property
    def n_models(self) -> int:
        return len(self.models)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(backend.name for backend in self.models)


def load_pool(config_path: str | Path, *, timeout_ms: int | None = None) -> EnsemblePool:
    """Instantiate the backends declared in a pool config file.

    The file is a JSON list of ``{"type": "table" | "http", ...}`` entries;
    table entries reference a table file (``path``, relative to the config
    file) or embed one inline (``table``). Every backend must support
    scoring, since the algorithm is built on mutual evaluation.
    """
    path = Path(config_path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise PoolConfigError(f"pool config not found: {path}") from exc
    except OSError as exc:
        raise PoolConfigError(f"cannot read pool config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise PoolConfigError(f"pool config {path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise PoolConfigError(f"pool config {path}: expected a JSON list of backend entries")
    if not raw:
        raise PoolConfigError(f"pool config {path}: declares no models")

    backends: list[Backend] = []
    for index, entry in enumerate(raw):
        where = f"pool config {path} entry {index}"
        if not isinstance(entry, dict):
            raise PoolConfigError(f"{where}: expected an object")
        kind = entry.get("type")
        try:
            if kind == "table":
                if "path" in entry:
                    table_path = Path(entry["path"])
                    if not table_path.is_absolute():
                        table_path = path.parent / table_path
                    backend: Backend = TableLM.from_file(table_path, name=entry.get("name"))
                elif "table" in entry:
                    backend = TableLM.from_dict(
                        entry["table"], name=entry.get("name") or f"table-{index}"
                    )
                else:
                    raise ValueError("table entry needs a 'path' or an inline 'table'")
            elif kind == "http":
                backend = HttpBackend(
                    HttpBackendConfig(
                        base_url=entry.get("base_url", ""),
                        model=entry.get("model", ""),
                        name=entry.get("name", ""),
                        api_key_env=entry.get("api_key_env"),
                        timeout_s=(
                            timeout_ms / 1000.0
                            if timeout_ms is not None
                            else float(entry.get("timeout_s", 30.0))
                        ),
                        max_tokens_per_request=int(entry.get("max_tokens_per_request", 256)),
                        supports_scoring=bool(entry.get("supports_scoring", True)),
                    )
                )
            else:
                raise ValueError(f"unknown backend type {kind!r}")
        except (ValueError, OSError) as exc:
            raise PoolConfigError(f"{where}: {exc}") from exc
        if entry.get("supports_scoring", True) is False or not backend.supports_scoring:
            raise PoolConfigError(
                f"{where}: backend {backend.name!r} cannot score spans; "
                "mutual evaluation requires scoring support"
            )
        backends.append(backend)
    return EnsemblePool(models=tuple(backends))
