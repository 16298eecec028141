"""Exception types shared across the toolkit."""


class AdvBenchError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(AdvBenchError, ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValidationError):
    """A structured input file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CapabilityError(AdvBenchError):
    """The model handle does not support the requested operation."""


class NumericalError(AdvBenchError, ArithmeticError):
    """A loss or gradient became non-finite."""


class CampaignFailure(AdvBenchError):
    """Too many utterances failed for the campaign to be meaningful."""
