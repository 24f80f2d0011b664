"""Exception types shared across the package."""


class WeylPencilError(Exception):
    """Base class for all package errors."""


class SchemaError(WeylPencilError):
    """Config or data file does not match the documented schema."""


class ValidationError(WeylPencilError):
    """Pencil coefficients violate an admissibility requirement."""


class IntegratorError(WeylPencilError):
    """Adaptive ODE integration failed; carries the abscissa of failure."""

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


class AdmissibilityError(WeylPencilError):
    """Spectral parameter below the admissible radius of a series construction."""


class SingularSystemError(WeylPencilError):
    """A linear system required by the algorithm is numerically singular."""


class ContourError(WeylPencilError):
    """Contour parameters are inconsistent (radius ordering, pole enclosure)."""


class NoProgressError(WeylPencilError):
    """Stepwise reconstruction cannot advance past the current breakpoint."""
