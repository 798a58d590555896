"""Exception types shared across the package."""


class PhirtnError(Exception):
    """Base class for all errors raised by this package."""


class GrammarError(PhirtnError):
    """Invalid grammar content (parse errors, invariant violations)."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ExpansionLimitError(PhirtnError):
    """Grammar expansion exceeds the caller-supplied query budget."""


class ModelBuildError(PhirtnError):
    """Model construction failed (bad hyperparameters, degenerate input)."""


class FormatError(PhirtnError):
    """Malformed serialized model (binary container or ARPA text)."""


class OracleCapError(PhirtnError):
    """Brute-force oracle would exceed its materialization cap."""
