"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/input problems exit 2,
checkpoint/config mismatches exit 3, anything else exits 1.
"""


class DafError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(DafError):
    """Operands have incompatible shapes; the message names both."""


class ConfigurationError(DafError):
    """Invalid configuration value or combination."""


class ContractError(DafError):
    """A documented precondition was violated by the caller."""


class InputTooShortError(DafError):
    """A sequence is shorter than an operation requires."""


class ParseError(DafError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyDatasetError(DafError):
    """A dataset or split ended up with no windows."""


class MetricError(DafError):
    """A metric is undefined for the given inputs (e.g. zero denominator)."""


class CheckpointMismatchError(DafError):
    """Checkpoint contents do not match the configured model."""
