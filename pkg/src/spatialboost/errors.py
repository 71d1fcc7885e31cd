"""Shared exception types."""


class ConfigurationError(ValueError):
    """Inconsistent or invalid inputs/configuration (lengths, ranges, keys)."""


class NumericalError(RuntimeError):
    """A numerical routine lost positive definiteness or hit a singular system."""


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; carries the stage name and the root cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
