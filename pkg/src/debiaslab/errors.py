"""Exception taxonomy shared by all modules."""


class DebiaslabError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(DebiaslabError):
    """An argument violates a documented precondition."""


class FormatError(DebiaslabError):
    """A file or stream does not match its declared binary/text format."""


class EvaluationError(DebiaslabError):
    """A metric is undefined for the given inputs (e.g. a single cluster)."""


class RunError(DebiaslabError):
    """A training run failed (e.g. diverged); carries the epoch index."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class ConfigError(DebiaslabError):
    """An experiment config file is invalid; message names the field path."""
