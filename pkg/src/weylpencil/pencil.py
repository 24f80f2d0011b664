"""Domain types for matrix quadratic Sturm-Liouville pencils on the half-line.

A pencil is the boundary value problem

    Y'' + (rho^2 I + 2 i rho Q1(x) + Q0(x)) Y = 0,   x > 0,
    Y'(0) + (i rho h1 + h0) Y(0) = 0,

with m x m complex matrix coefficients.  The half-line is truncated at
``xmax``; coefficient functions are treated as zero beyond it, and the
validation report quantifies how much mass that truncation discards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import SchemaError, ValidationError

__all__ = [
    "matrix_norm",
    "MatrixFunction",
    "PencilCoefficients",
    "CheckResult",
    "ValidationReport",
    "validate_pencil",
    "sample_preset",
    "preset_matrix_function",
    "make_pencil",
    "zero_pencil",
]


def matrix_norm(A):
    """Maximum absolute row sum of a matrix (or stack of matrices).

    This is the operator infinity-norm, ``max_j sum_k |A[j, k]|``; it is
    sub-multiplicative and is the norm used by every bound in the package.
    Accepts arrays of shape ``(..., m, m)`` and reduces the last two axes.
    """
    A = np.asarray(A)
    return np.max(np.sum(np.abs(A), axis=-1), axis=-1)


def _as_square(mat, m, name):
    arr = np.asarray(mat, dtype=complex)
    if arr.shape != (m, m):
        raise SchemaError(f"{name} must be {m}x{m}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"{name} has non-finite entries")
    return arr


class MatrixFunction:
    """Grid-sampled m x m matrix function of x with a piecewise-cubic rule.

    Values are exact at the nodes.  A derivative may be supplied (presets
    carry the analytic one); otherwise the spline derivative is used.  An
    analytic callable ``fn`` or an integrator dense-output ``dense`` may be
    attached, and takes precedence over the spline for off-node evaluation.
    Instances are immutable after construction.
    """

    def __init__(self, grid, values, deriv=None, fn=None, fn_deriv=None, dense=None,
                 dense_deriv=None):
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=complex)
        if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
            raise SchemaError("grid must be strictly increasing 1-d")
        if values.shape[0] != grid.size or values.ndim != 3 or values.shape[1] != values.shape[2]:
            raise SchemaError("values must have shape (len(grid), m, m)")
        self.grid = grid
        self.values = values
        self.deriv_values = None if deriv is None else np.asarray(deriv, dtype=complex)
        self.fn = fn
        self.fn_deriv = fn_deriv
        self._dense = dense
        self._dense_deriv = dense_deriv
        self._spline = None
        self._dspline = None
        for arr in (self.grid, self.values, self.deriv_values):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def m(self):
        return self.values.shape[1]

    @property
    def xmax(self):
        return float(self.grid[-1])

    def _get_spline(self):
        if self._spline is None:
            self._spline = CubicSpline(self.grid, self.values, axis=0)
        return self._spline

    def _get_dspline(self):
        if self._dspline is None:
            if self.deriv_values is not None:
                self._dspline = CubicSpline(self.grid, self.deriv_values, axis=0)
            else:
                self._dspline = self._get_spline().derivative()
        return self._dspline

    def __call__(self, x):
        """Evaluate at x (scalar or array); zero beyond xmax, clamped below 0."""
        x = np.asarray(x, dtype=float)
        if self.fn is not None:
            out = self.fn(x)
        elif self._dense is not None:
            out = self._eval_dense(self._dense, x)
        else:
            out = self._get_spline()(np.clip(x, self.grid[0], self.grid[-1]))
        if np.any(x > self.grid[-1]):
            out = np.where((x > self.grid[-1])[..., None, None], 0.0, out)
        return out

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.fn_deriv is not None:
            out = self.fn_deriv(x)
        elif self._dense_deriv is not None:
            out = self._eval_dense(self._dense_deriv, x)
        else:
            out = self._get_dspline()(np.clip(x, self.grid[0], self.grid[-1]))
        if np.any(x > self.grid[-1]):
            out = np.where((x > self.grid[-1])[..., None, None], 0.0, out)
        return out

    def _eval_dense(self, dense, x):
        m = self.m
        flat = dense(np.atleast_1d(x).ravel())  # (k, npts)
        out = flat.T.reshape(np.atleast_1d(x).size, m, m)
        return out.reshape(np.shape(x) + (m, m))

    def transpose(self):
        return MatrixFunction(
            self.grid,
            self.values.transpose(0, 2, 1),
            deriv=None if self.deriv_values is None else self.deriv_values.transpose(0, 2, 1),
            fn=None if self.fn is None else (lambda x, f=self.fn: np.swapaxes(f(x), -1, -2)),
            fn_deriv=None if self.fn_deriv is None else (
                lambda x, f=self.fn_deriv: np.swapaxes(f(x), -1, -2)),
        )

    def scale(self, c):
        return MatrixFunction(
            self.grid, c * self.values,
            deriv=None if self.deriv_values is None else c * self.deriv_values,
            fn=None if self.fn is None else (lambda x, f=self.fn: c * f(x)),
            fn_deriv=None if self.fn_deriv is None else (lambda x, f=self.fn_deriv: c * f(x)),
        )


@dataclass(frozen=True)
class PencilCoefficients:
    """Coefficients (Q1, Q0, h0, h1) of a pencil truncated at xmax."""

    m: int
    Q1: MatrixFunction
    Q0: MatrixFunction
    h0: np.ndarray
    h1: np.ndarray
    xmax: float

    def __post_init__(self):
        object.__setattr__(self, "h0", _as_square(self.h0, self.m, "h0"))
        object.__setattr__(self, "h1", _as_square(self.h1, self.m, "h1"))
        self.h0.setflags(write=False)
        self.h1.setflags(write=False)

    @property
    def grid(self):
        return self.Q1.grid

    def boundary_form(self, rho):
        """Matrix i*rho*h1 + h0 entering the boundary condition."""
        return 1j * np.asarray(rho)[..., None, None] * self.h1 + self.h0

    def transpose(self):
        """Pencil with transposed coefficient matrices.

        Row-module ("star") solutions of this pencil are the transposes of
        column solutions of the transposed pencil.
        """
        return PencilCoefficients(self.m, self.Q1.transpose(), self.Q0.transpose(),
                                  self.h0.T, self.h1.T, self.xmax)

    def reflect(self):
        """Pencil seen by the substitution rho -> -rho (Q1 -> -Q1, h1 -> -h1).

        Solutions of the original pencil at rho in the lower half-plane are
        solutions of the reflected pencil at -rho in the upper one.
        """
        return PencilCoefficients(self.m, self.Q1.scale(-1.0), self.Q0,
                                  self.h0, -self.h1, self.xmax)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self):
        return all(c.passed for c in self.checks)

    def add(self, name, passed, value, threshold, detail=""):
        self.checks.append(CheckResult(name, bool(passed), float(value), float(threshold), detail))

    def __str__(self):
        lines = []
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            lines.append(f"[{status}] {c.name}: value={c.value:.3e} threshold={c.threshold:.3e} {c.detail}")
        return "\n".join(lines)


def validate_pencil(coeffs, tol=1e-12, tail_tol=1e-3):
    """Check admissibility of a pencil; returns a report, never raises.

    Checks the invertibility of I +/- h1 (with condition numbers), finiteness
    of the coefficient integrals on the grid, and decay of Q1, Q0 near xmax
    below ``tail_tol`` (the truncation crime of cutting the half-line).
    """
    report = ValidationReport()
    m = coeffs.m
    eye = np.eye(m)
    for sign, label in ((1.0, "I+h1"), (-1.0, "I-h1")):
        mat = eye + sign * coeffs.h1
        det = np.linalg.det(mat)
        cond = np.linalg.cond(mat) if abs(det) > 0 else np.inf
        report.add(f"invertible({label})", abs(det) > tol, abs(det), tol,
                   detail=f"cond={cond:.3e}")
    x = coeffs.grid
    q1 = matrix_norm(coeffs.Q1(x))
    q1p = matrix_norm(coeffs.Q1.derivative(x))
    q0 = matrix_norm(coeffs.Q0(x))
    for name, vals in (("int(|Q0|)", q0), ("int(|Q1|)", q1), ("int(|Q1'|)", q1p)):
        integral = float(np.trapezoid(vals, x))
        report.add(f"finite:{name}", np.isfinite(integral), integral, np.inf)
    tail = x >= x[0] + 0.92 * (x[-1] - x[0])
    tail_mass = float(max(q1[tail].max(initial=0.0), q0[tail].max(initial=0.0)))
    report.add("tail-decay", tail_mass <= tail_tol, tail_mass, tail_tol,
               detail="max coefficient norm on the outer 8% of the grid")
    return report


def require_valid(coeffs, **kw):
    report = validate_pencil(coeffs, **kw)
    if not report.ok:
        raise ValidationError("pencil failed validation:\n" + str(report))
    return report


_SKEW_DEFAULT = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _amplitude_matrix(params, m):
    amp = params.get("amplitude", 1.0)
    amp = np.asarray(amp, dtype=complex)
    if amp.ndim == 0:
        direction = params.get("direction")
        if direction is not None:
            return complex(amp) * np.asarray(direction, dtype=complex)
        return complex(amp) * np.eye(m)
    if amp.shape != (m, m):
        raise SchemaError(f"amplitude matrix must be {m}x{m}")
    return amp


def preset_matrix_function(name, params, grid, m):
    """Sample a named coefficient family on a grid, with analytic derivative.

    Known presets: ``zero``, ``constant``, ``gaussian-decay``,
    ``exponential-decay``, ``skew-hermitian-gaussian``.
    """
    grid = np.asarray(grid, dtype=float)
    params = dict(params or {})
    if name == "zero":
        fn = lambda x: np.zeros(np.shape(x) + (m, m), dtype=complex)
        return MatrixFunction(grid, fn(grid), deriv=fn(grid), fn=fn, fn_deriv=fn)
    if name == "constant":
        A = _amplitude_matrix(params, m)
        fn = lambda x: np.broadcast_to(A, np.shape(x) + (m, m)).astype(complex)
        zero = lambda x: np.zeros(np.shape(x) + (m, m), dtype=complex)
        return MatrixFunction(grid, fn(grid), deriv=zero(grid), fn=fn, fn_deriv=zero)
    if name == "gaussian-decay":
        A = _amplitude_matrix(params, m)
        w = float(params.get("width", 1.0))
        c = float(params.get("center", 0.0))
        fn = lambda x: np.exp(-((np.asarray(x, dtype=float) - c) / w) ** 2)[..., None, None] * A
        fnd = lambda x: (-2.0 * (np.asarray(x, dtype=float) - c) / w**2
                         * np.exp(-((np.asarray(x, dtype=float) - c) / w) ** 2))[..., None, None] * A
        return MatrixFunction(grid, fn(grid), deriv=fnd(grid), fn=fn, fn_deriv=fnd)
    if name == "exponential-decay":
        A = _amplitude_matrix(params, m)
        rate = float(params.get("rate", 1.0))
        fn = lambda x: np.exp(-rate * np.asarray(x, dtype=float))[..., None, None] * A
        fnd = lambda x: (-rate * np.exp(-rate * np.asarray(x, dtype=float)))[..., None, None] * A
        return MatrixFunction(grid, fn(grid), deriv=fnd(grid), fn=fn, fn_deriv=fnd)
    if name == "skew-hermitian-gaussian":
        amp = complex(params.get("amplitude", 0.3))
        w = float(params.get("width", 1.0))
        c = float(params.get("center", 0.0))
        direction = np.asarray(params.get("direction", _SKEW_DEFAULT if m == 2 else None),
                               dtype=complex)
        if direction.shape != (m, m):
            raise SchemaError("skew-hermitian-gaussian needs an m x m direction for m != 2")
        if matrix_norm(direction + direction.conj().T) > 1e-13:
            raise SchemaError("direction matrix must be skew-Hermitian")
        A = amp * direction
        fn = lambda x: np.exp(-((np.asarray(x, dtype=float) - c) / w) ** 2)[..., None, None] * A
        fnd = lambda x: (-2.0 * (np.asarray(x, dtype=float) - c) / w**2
                         * np.exp(-((np.asarray(x, dtype=float) - c) / w) ** 2))[..., None, None] * A
        return MatrixFunction(grid, fn(grid), deriv=fnd(grid), fn=fn, fn_deriv=fnd)
    raise SchemaError(f"unknown preset {name!r}")


def sample_preset(name, params, grid, m=2):
    """Public alias kept separate so presets can be sampled without a pencil."""
    return preset_matrix_function(name, params, grid, m)


def make_pencil(m, xmax, n, Q1, Q0, h0=None, h1=None):
    """Assemble a pencil from preset descriptors or MatrixFunctions.

    ``Q1``/``Q0`` may be a MatrixFunction or a ``(name, params)`` pair /
    ``{"preset": name, "params": {...}}`` descriptor.
    """
    grid = np.linspace(0.0, float(xmax), int(n))

    def coerce(q):
        if isinstance(q, MatrixFunction):
            return q
        if isinstance(q, dict):
            return preset_matrix_function(q["preset"], q.get("params", {}), grid, m)
        name, params = q
        return preset_matrix_function(name, params, grid, m)

    h0 = np.zeros((m, m)) if h0 is None else h0
    h1 = np.zeros((m, m)) if h1 is None else h1
    return PencilCoefficients(m, coerce(Q1), coerce(Q0), h0, h1, float(xmax))


def zero_pencil(m=2, xmax=6.0, n=121, h0=None, h1=None):
    return make_pencil(m, xmax, n, ("zero", {}), ("zero", {}), h0=h0, h1=h1)
