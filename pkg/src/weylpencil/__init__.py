"""Forward and inverse Weyl-matrix computations for matrix quadratic
Sturm-Liouville pencils on the half-line."""

from .pencil import (
    matrix_norm,
    MatrixFunction,
    PencilCoefficients,
    ValidationReport,
    validate_pencil,
    sample_preset,
    make_pencil,
    zero_pencil,
)
from .ode import (
    Tolerances,
    SolutionField,
    integrate_ivp,
    transport,
    transport_correction,
    base_solution,
    base_fields,
)
from .jost import (
    AuxiliaryBounds,
    JostConfig,
    compute_aux_bounds,
    jost_solution,
    birkhoff_solution,
    check_independence,
)
from .contour import Contour, build_contour, contour_integral, estimate_pole_bound

__version__ = "0.1.0"
