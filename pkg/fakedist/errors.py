"""Exception hierarchy.

Every exception carries the process exit code the CLI reports for it.
"""

from typing import Any


class FakedistError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ConfigError(FakedistError):
    """Run configuration could not be parsed or validated."""


class ArtifactError(FakedistError):
    """A geometry, field or report file could not be read or written."""


class PreconditionError(FakedistError):
    """A mathematical precondition of an operation does not hold."""

    exit_code = 2


class DomainError(PreconditionError):
    """Argument outside the domain of a formula (p <= 1, r <= 0, ...)."""


class ValueRangeError(PreconditionError):
    """Value outside the range covered by a table or a kernel."""


class InvalidProfileError(PreconditionError):
    """Curvature profile is negative or increasing."""


class InternalConsistencyError(PreconditionError):
    """Computed data contradicts a property that must hold by construction."""


class DivergentKernelError(PreconditionError):
    """The Green kernel does not exist: the geometry is parabolic."""


class IndeterminateError(PreconditionError):
    """Tail growth too close to the critical exponent to decide integrability."""


class InvalidMetricError(PreconditionError):
    """Metric is not positive definite somewhere."""


class DegenerateCapacitorError(PreconditionError):
    """Capacitor without free vertices between its two plates."""


class ConvergenceError(PreconditionError):
    """Iterative solver stopped before reaching its tolerance."""

    def __init__(self, message: str, trace: list[dict[str, Any]] | None = None) -> None:
        super().__init__(message)
        self.trace = trace or []


class ExhaustionDivergenceError(PreconditionError):
    """Kernels of the exhaustion do not form a Cauchy sequence."""

    def __init__(self, message: str, sup_norms: tuple[float, float]) -> None:
        super().__init__(message)
        self.sup_norms = sup_norms


class NoLimitError(PreconditionError):
    """The p -> 1 continuation does not settle."""

    def __init__(self, message: str, cauchy_trace: list[float]) -> None:
        super().__init__(message)
        self.cauchy_trace = cauchy_trace
