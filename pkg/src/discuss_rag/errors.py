"""Exception hierarchy shared across the package."""


class DiscussRAGError(Exception):
    """Base class for all package errors."""


# gateway
class GatewayError(DiscussRAGError):
    pass


class TransportError(GatewayError):
    """Network or HTTP failure that persisted through all retries."""


class BackendRefusal(GatewayError):
    """Non-retryable API error (4xx, malformed response, empty completion)."""


class FixtureExhausted(GatewayError):
    """The scripted backend has no entry matching the request.

    Deliberately not caught by the per-agent degradation in the discussion
    loop: it signals a test/fixture mismatch, not a runtime fault.
    """


class DimensionMismatch(DiscussRAGError):
    pass


# corpus / index
class CorpusError(DiscussRAGError):
    pass


class InvalidChunking(CorpusError):
    pass


class EmptyCorpus(CorpusError):
    pass


class DuplicateChunkId(CorpusError):
    pass


class FormatError(CorpusError):
    pass


class ChecksumMismatch(FormatError):
    pass


# agents
class RosterParseError(DiscussRAGError):
    pass


class AllDeclined(DiscussRAGError):
    pass


class VerdictParseError(DiscussRAGError):
    pass


class ParseFailure(DiscussRAGError):
    """No valid option label could be extracted from a generation."""


class AnswerParseError(ParseFailure):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


# benchmark
class DatasetFormatError(DiscussRAGError):
    def __init__(self, message: str, problems: list[tuple[int, str]] | None = None):
        super().__init__(message)
        self.problems = problems or []


class PipelineError(DiscussRAGError):
    """A stage of answer_query failed; carries the partial trace."""

    def __init__(self, stage: str, cause: BaseException, trace=None):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.trace = trace
