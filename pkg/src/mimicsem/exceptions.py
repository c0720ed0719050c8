"""Error types raised across the package.

Four families, used by the CLI to pick exit codes: data/parse errors,
specification errors, numeric errors, and IO errors.
"""

from __future__ import annotations


class MimicError(Exception):
    """Base class for every error this package raises deliberately."""


class DataError(MimicError):
    """Malformed input text or data files."""


class SpecError(MimicError):
    """Model specification inconsistent with itself or with the data."""

    def __init__(self, message: str, diagnostics: list | None = None):
        super().__init__(message)
        # full diagnostic list when validation collected more than one problem
        self.diagnostics = diagnostics if diagnostics is not None else [self]


class NumericError(MimicError):
    """Numerically invalid state encountered during estimation."""


class IoError(MimicError):
    """Filesystem failure while reading or writing artifacts."""


# ---------------------------------------------------------------- spec errors

class UnknownColumn(SpecError):
    """A label in the model spec does not resolve to a data column."""


class Underidentified(SpecError):
    """Free-parameter count or instrument order condition fails."""


class EndogenousWithoutIV(SpecError):
    """Endogenous cause declared but a non-instrumented estimator chosen."""


class DimensionMismatch(SpecError):
    """Matrix or vector dimensions do not conform."""


class SingleGroup(SpecError):
    """Index construction needs at least two distinct groups."""


class EmptyAfterFiltering(SpecError):
    """Complete-case filtering removed every row."""


# ------------------------------------------------------------- numeric errors

class NonPDPhi(NumericError):
    """Cause covariance failed a positive-definite factorization."""


class NonPDSigma(NumericError):
    """Model-implied covariance not positive definite at evaluation."""


class NonPDBlock(NumericError):
    """A covariance block of the dynamic model is not positive semidefinite."""


class NonPDOmega(NumericError):
    """Reduced-form indicator covariance not positive definite."""


class RankDeficient(NumericError):
    """Design or instrument matrix singular beyond tolerance."""


class NonConvergence(NumericError):
    """Iteration cap reached without meeting the convergence criteria."""


class StepFailure(NumericError):
    """Line search could not produce an evaluable step."""


class ComplexEigenvalue(NumericError):
    """Eigen-solution left the real axis, signalling an invalid state."""


class SingularHessian(NumericError):
    """Hessian not invertible when forming the parameter covariance."""


class SeriesTooShort(NumericError):
    """Too few time points for the requested time-series operation."""


class ConstantSeries(NumericError):
    """A series with zero variance cannot be classified or differenced usefully."""


class ZeroDf(NumericError):
    """Fit indices undefined: zero degrees of freedom with nonzero misfit."""


class TooFewConverged(NumericError):
    """Under half of the bootstrap resamples produced a converged fit."""


# ----------------------------------------------------------- ingestion errors

class ParseError(DataError):
    """Config text violates the grammar.  Carries a line number."""

    def __init__(self, message: str, line: int | None = None,
                 diagnostics: list | None = None):
        loc = f"line {line}: " if line is not None else ""
        super().__init__(loc + message)
        self.line = line
        self.diagnostics = diagnostics if diagnostics is not None else [self]


class MalformedCsv(DataError):
    """CSV structure broken (ragged row, missing header)."""

    def __init__(self, message: str, row: int | None = None):
        loc = f"row {row}: " if row is not None else ""
        super().__init__(loc + message)
        self.row = row


class NonNumericCell(DataError):
    """A referenced numeric column holds an unparseable token."""

    def __init__(self, message: str, row: int, col: str):
        super().__init__(f"row {row}, column '{col}': {message}")
        self.row = row
        self.col = col
