"""Exception types raised across the package."""


class LyapGapError(Exception):
    """Base class for all package errors."""


class DomainError(LyapGapError, ValueError):
    """An argument lies outside the domain of the operation (e.g. a zero vector)."""


class DegenerateSumError(LyapGapError, ValueError):
    """Two subspaces do not form a numerically complementary direct sum."""


class PreconditionError(LyapGapError, ValueError):
    """A documented precondition of a construction does not hold."""


class InvertibilityError(PreconditionError):
    """A matrix factor is numerically singular (condition number too large)."""


class AccumulationError(LyapGapError, ArithmeticError):
    """A running matrix product over- or underflowed despite renormalisation."""


class SequenceFormatError(LyapGapError, ValueError):
    """A sequence file could not be parsed or violates the norm bound."""


class CertificationError(LyapGapError, ArithmeticError):
    """A constructed target failed independent re-validation of its certificate."""
