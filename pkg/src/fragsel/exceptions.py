from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BACKEND_FAILURE = 3
EXIT_DATA_ERROR = 4


class FragselError(Exception):
    """Base class of every error raised by fragsel.

    ``context`` holds the identifiers (query_id, doc_id, fragment_id, endpoint...)
    of the objects involved; callers may add to it while re-raising.
    """

    code = "FRAGSEL_ERROR"
    exit_code = EXIT_DATA_ERROR

    def __init__(self, message: str = "", **context):
        super().__init__(message)
        self.message = message
        self.context = dict(context)

    def add_context(self, **context) -> "FragselError":
        for key, value in context.items():
            self.context.setdefault(key, value)
        return self

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.message} ({details})"


class DataError(FragselError):
    code = "DATA_ERROR"


class EmptyDocument(DataError):
    code = "EMPTY_DOCUMENT"


class SingleSentence(DataError):
    code = "SINGLE_SENTENCE"


class NotAnImage(DataError):
    code = "NOT_AN_IMAGE"


class LengthMismatch(DataError):
    code = "LENGTH_MISMATCH"


class DimensionMismatch(DataError):
    code = "DIMENSION_MISMATCH"


class DomainError(DataError):
    code = "DOMAIN_ERROR"


class PreconditionViolation(DataError):
    code = "PRECONDITION_VIOLATION"


class UnsortedEdges(DataError):
    code = "UNSORTED_EDGES"


class MissingTeacherLogits(DataError):
    code = "MISSING_TEACHER_LOGITS"


class EmptyRetrieval(DataError):
    code = "EMPTY_RETRIEVAL"


class ConfigError(DataError):
    code = "CONFIG_ERROR"


class FixtureParseError(DataError):
    code = "FIXTURE_PARSE_ERROR"


class FormatError(DataError):
    code = "FORMAT_ERROR"


class BackendFailure(FragselError):
    code = "BACKEND_FAILURE"
    exit_code = EXIT_BACKEND_FAILURE

    def __init__(
        self,
        message: str = "",
        status: Optional[int] = None,
        body_excerpt: Optional[str] = None,
        **context,
    ):
        if status is not None:
            context.setdefault("status", status)
        super().__init__(message, **context)
        self.status = status
        self.body_excerpt = body_excerpt


class ScorerFailure(BackendFailure):
    code = "SCORER_FAILURE"


class DetectorFailure(BackendFailure):
    code = "DETECTOR_FAILURE"


class FixtureMiss(BackendFailure):
    code = "FIXTURE_MISS"


class BackendTimeout(BackendFailure):
    code = "BACKEND_TIMEOUT"
