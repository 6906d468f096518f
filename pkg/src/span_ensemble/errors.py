"""Exception types shared across the package."""


class SpanEnsembleError(Exception):
    """Base class for all errors raised by this package."""


class BackendError(SpanEnsembleError):
    """A model backend failed: transport error, timeout, malformed response,
    or a request the backend cannot satisfy (e.g. a zero-probability token)."""

    def __init__(self, message: str, *, model: str | None = None):
        super().__init__(message if model is None else f"[{model}] {message}")
        self.model = model


class ScoringUnsupportedError(BackendError):
    """The backend cannot expose token logprobs, so it cannot score spans."""


class PoolConfigError(SpanEnsembleError):
    """The pool configuration is missing, malformed, or inconsistent."""


class RoundError(SpanEnsembleError):
    """Every generation call in a round failed; the round cannot proceed."""


class NoEligibleSpanError(SpanEnsembleError):
    """No candidate span has a single valid score; nothing can be selected."""


class DatasetError(SpanEnsembleError):
    """An evaluation dataset could not be read or fails validation."""
