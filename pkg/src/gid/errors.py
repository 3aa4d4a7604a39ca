"""Exception hierarchy shared across the package.

The CLI maps these onto its stable exit codes: UsageError -> 2,
DataError -> 3, TrainingError -> 4.
"""


class GidError(Exception):
    """Base class for all package errors."""


class UsageError(GidError):
    """Bad configuration value or invalid invocation."""


class ConfigError(UsageError):
    """A configuration value is out of its legal range."""


class DataError(GidError):
    """Problem with an input artifact (corpus, fixture, split, cache)."""


class SchemaError(DataError):
    """A record is missing a required field or has the wrong shape."""


class CorpusError(DataError):
    """A corpus file is unusable as a whole (e.g. empty)."""


class FixtureError(DataError):
    """A meta-information fixture violates the cache schema."""


class GenerationError(DataError):
    """The meta-information provider failed after retries."""

    def __init__(self, message: str, failed_labels: list[str] | None = None):
        super().__init__(message)
        self.failed_labels = failed_labels or []


class ProviderParseError(DataError):
    """Provider output could not be parsed; raw payload retained."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class CapabilityError(UsageError):
    """An encoder backend lacks a capability the pipeline needs."""


class EncodeError(GidError):
    """Encoding failed (e.g. mask placeholder lost)."""


class CoverageError(DataError):
    """Meta-information does not cover every category."""


class VerbalizerError(GidError):
    """A label word cannot be tokenized into vocabulary ids."""


class ShapeError(GidError):
    """Tensor or sequence dimensions do not agree."""


class IterationError(DataError):
    """A batch iterator was asked to iterate an empty partition."""


class EvaluationError(DataError):
    """Predictions reference labels outside the declared label space."""


class TrainingError(GidError):
    """Training aborted (e.g. non-finite loss)."""
