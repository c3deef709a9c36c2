"""Exception types shared across the package."""


class ReachguardError(Exception):
    """Base class for all package-specific errors."""


class InvalidStateError(ReachguardError):
    """A vehicle state contains non-finite entries."""


class ConfigurationError(ReachguardError):
    """Grid, horizon, or solver configuration is unusable."""


class CFLViolationError(ConfigurationError):
    """Requested time step violates the CFL stability bound."""


class DomainTooSmallError(ReachguardError):
    """The sub-zero set reached a non-periodic grid boundary."""

    def __init__(self, axes, message=None):
        self.axes = tuple(axes)
        if message is None:
            message = (
                "sub-zero set touches the grid boundary on axis(es) "
                f"{', '.join(self.axes)}; enlarge the grid"
            )
        super().__init__(message)


class NumericalFailureError(ReachguardError):
    """A numerical routine produced NaN or failed to converge."""


class OutOfRangeError(ReachguardError):
    """A family query lies outside the precomputed lattice."""


class ScenarioFormatError(ReachguardError):
    """A scenario file violates the documented schema."""
