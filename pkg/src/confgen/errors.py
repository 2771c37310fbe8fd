"""Shared exception bases.

DomainError covers expected analysis failures (inconsistent bounds, degenerate
statistics, non-finite numerics); UsageError covers malformed inputs and other
caller mistakes. The CLI maps them to exit codes 1 and 2 respectively.
"""


class DomainError(Exception):
    """A computation failed for a reason inherent to the data or model."""


class UsageError(Exception):
    """The caller supplied unusable input (bad file, bad arguments)."""


class NumericalError(DomainError):
    """A numerical quantity became non-finite.

    `term` names the offending quantity when known.
    """

    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term
