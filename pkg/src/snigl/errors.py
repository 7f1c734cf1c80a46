"""Semantic exception hierarchy shared across the package.

Public functions never raise bare ``ValueError``; every contract violation
maps to one of the classes below so callers (and the CLI exit-code mapping)
can tell input mistakes, degenerate statistics, and format problems apart.
"""

from __future__ import annotations


class SniglError(Exception):
    """Base class for every error raised by this package."""


class InputValidationError(SniglError, ValueError):
    """An argument violates its domain/type/shape contract."""


class ParameterRangeError(InputValidationError):
    """A numeric parameter is outside its documented range."""


class DegenerateDenominatorError(SniglError):
    """A bound or ratio is undefined because its denominator vanishes."""


class DivisionGuardError(SniglError):
    """An expectation in a ratio estimator is numerically zero."""


class CalibrationDegeneracyError(SniglError):
    """Flip rates sum to one (confusion matrix singular in the binary sense):
    pseudo-labels carry no information about the true label, so the
    calibration inverse does not exist."""


class SingularMatrixError(SniglError):
    """A confusion matrix required to be invertible is singular."""


class IllConditionedWarning(UserWarning):
    """A confusion-matrix inversion exceeds the condition-number cap."""


class ExogeneityError(SniglError):
    """Cause and effect share an ancestor, so interventional probabilities
    are not identified by conditionals."""


class NonBinaryCauseError(SniglError):
    """Necessity/sufficiency enumeration only supports two-valued causes
    (the complement intervention is otherwise ambiguous)."""


class IntractableEnumerationError(SniglError):
    """The exogenous state space exceeds the enumeration cap."""


class ZeroProbabilityEvidenceError(SniglError):
    """Conditioning event has (numerically) zero probability."""


class MissingPredictorError(SniglError):
    """A pseudo-label predictor lacks an entry for a value in the support."""


class FormatError(SniglError):
    """A serialized artifact is malformed; carries the offending line."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class VersionMismatchError(FormatError):
    """A serialized artifact declares an unsupported format version."""


class EmptyEnvironmentError(SniglError):
    """An environment referenced by name contains no graphs."""


class UnknownEnvironmentError(SniglError):
    """A per-environment head was requested for an unknown environment."""


class DimensionMismatchError(InputValidationError):
    """Array dimensions do not match the model configuration."""


class NonFiniteLossError(SniglError):
    """Training produced a non-finite risk term; names the offending term."""


class SingleClassPseudoLabelsError(SniglError):
    """All pseudo-labels fall in one class; the biased-head fit and the
    subsequent calibration are undefined."""


class MissingArtifactError(SniglError):
    """A pipeline stage requires an artifact a previous stage did not write."""
