"""Exception types shared across the package."""


class CotPruneError(Exception):
    """Base class for all package errors."""


class ConfigError(CotPruneError, ValueError):
    """Invalid configuration (zero-sized dimension, bad fractions, ...)."""


class InputError(CotPruneError, ValueError):
    """Invalid operation input (out-of-vocab token, empty dataset, ...)."""


class ParseError(CotPruneError, ValueError):
    """Malformed serialized data. Carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(CotPruneError, ArithmeticError):
    """Non-finite or degenerate values where finite ones are required."""


class ProvenanceError(CotPruneError, ValueError):
    """Artifact does not match the provenance it claims (hash mismatch)."""


class RefusalError(CotPruneError, ValueError):
    """Request exceeds a hard safety cap (e.g. exact solves on too many parameters)."""


class StrategySkip(CotPruneError):
    """Control-flow signal: a pruning strategy cannot run (e.g. empty flip set)."""
