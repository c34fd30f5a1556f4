"""Exception hierarchy shared by all modules."""

from __future__ import annotations

__all__ = [
    "DegradError",
    "DomainError",
    "StepSizeError",
    "TopologyValidityError",
    "DegenerateTopologyError",
    "DegenerateObjectiveError",
    "DivergenceConditionError",
    "CertificationError",
    "CapabilityError",
    "ConvergenceError",
    "NumericalError",
]


class DegradError(Exception):
    """Base class for every error raised by the package."""


class DomainError(DegradError, ValueError):
    """An argument lies outside the domain of the operation."""


class StepSizeError(DomainError):
    """A step size (or Laplacian epsilon) violates its admissible range.

    The offending inequality is kept in ``inequality`` so callers can
    report it verbatim.
    """

    def __init__(self, message: str, inequality: str | None = None):
        super().__init__(message)
        self.inequality = inequality or message


class TopologyValidityError(DomainError):
    """Weight matrix is not symmetric, not stochastic or not connected."""


class DegenerateTopologyError(DomainError):
    """The spectral gap vanishes (lambda_2 >= 1)."""


class DegenerateObjectiveError(DomainError):
    """Strong convexity cannot be certified."""


class DivergenceConditionError(DomainError):
    """The noisy contraction condition c^2 + omega^2 < 1 fails."""


class CertificationError(DegradError):
    """Observed gradients contradict the declared (mu, L) constants."""


class CapabilityError(DegradError):
    """A requested feature is not available for this object or config."""


class ConvergenceError(DegradError):
    """An iterative solver hit its iteration cap."""


class NumericalError(DegradError):
    """A linear-algebra kernel failed."""
