"""Shared adaptive integrator and the Cauchy problems of the forward solver.

Every linear matrix ODE in the package goes through :func:`integrate_ivp`
(an adaptive 4th/5th-order Runge-Kutta pair).  Second-order systems are
rewritten as first-order block systems.  Distinct spectral parameters are
integrated as one stacked system so a batch of rho values costs one solver
sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegratorError
from .pencil import MatrixFunction, matrix_norm

__all__ = [
    "Tolerances",
    "Trajectory",
    "integrate_ivp",
    "SolutionField",
    "transport",
    "transport_correction",
    "base_solution",
    "base_fields",
    "bracket",
    "ell_residual",
]

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12


@dataclass(frozen=True)
class Tolerances:
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    method: str = "DOP853"   # internal sweeps; the public default pair is RK45


@dataclass
class Trajectory:
    """Result of integrate_ivp: samples plus the dense interpolant."""

    t: np.ndarray
    y: np.ndarray          # (len(t),) + state shape
    dense: object          # scipy OdeSolution on the flattened state
    shape: tuple

    def __call__(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        flat = self.dense(x)            # (nflat, len(x))
        return flat.T.reshape((x.size,) + self.shape)


def integrate_ivp(rhs, y0, x_from, x_to, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                  t_eval=None, max_step=np.inf, method="RK45"):
    """Integrate y' = rhs(x, y) for an array-valued y, in either direction.

    Parameters
    ----------
    rhs : callable(x, y) -> array like y
    y0 : complex ndarray of any shape
    x_from, x_to : integration span (x_to < x_from integrates backwards)
    rtol, atol : local error control
    t_eval : optional abscissas for sampled output (monotone toward x_to)

    Returns a :class:`Trajectory`.  Raises IntegratorError on failure,
    reporting the abscissa where the step size underflowed.
    """
    y0 = np.asarray(y0, dtype=complex)
    shape = y0.shape

    def flat_rhs(x, yflat):
        return np.asarray(rhs(x, yflat.reshape(shape)), dtype=complex).ravel()

    sol = solve_ivp(flat_rhs, (float(x_from), float(x_to)), y0.ravel(), method=method,
                    rtol=rtol, atol=atol, t_eval=t_eval, max_step=max_step,
                    dense_output=True)
    if not sol.success:
        raise IntegratorError(f"integration failed: {sol.message}", x=sol.t[-1] if sol.t.size else x_from)
    y = sol.y.T.reshape((-1,) + shape)
    return Trajectory(sol.t, y, sol.sol, shape)


@dataclass
class SolutionField:
    """A matrix solution of the pencil equation sampled along the grid."""

    rho: complex
    grid: np.ndarray
    Y: np.ndarray          # (n, m, m)
    Yprime: np.ndarray     # (n, m, m)

    @property
    def m(self):
        return self.Y.shape[-1]

    def consistency_residual(self):
        """Max deviation of a finite-difference derivative of Y from Yprime."""
        dY = _fd_derivative(self.Y, self.grid)
        scale = max(matrix_norm(self.Yprime).max(), 1.0)
        return float(matrix_norm(dY[2:-2] - self.Yprime[2:-2]).max() / scale)


def _fd_derivative(values, grid, order=1):
    """4th-order finite differences along axis 0 on a uniform grid."""
    values = np.asarray(values)
    h = grid[1] - grid[0]
    n = values.shape[0]
    out = np.empty_like(values)
    if order == 1:
        c = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12.0 * h)
        edge = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / (12.0 * h)
    elif order == 2:
        c = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12.0 * h * h)
        edge = np.array([45.0, -154.0, 214.0, -156.0, 61.0, -10.0]) / (12.0 * h * h)
    else:
        raise ValueError("order must be 1 or 2")
    for k in range(2, n - 2):
        out[k] = sum(c[j] * values[k - 2 + j] for j in range(5) if c[j] != 0.0)
    ne = edge.size
    for k in (0, 1):
        out[k] = sum(edge[j] * values[k + j] for j in range(ne))
    sign = 1.0 if order == 2 else -1.0
    for k in (n - 2, n - 1):
        out[k] = sign * sum(edge[j] * values[k - j] for j in range(ne))
    return out


def fd_derivative(values, grid, order=1):
    """Public 4th-order grid differentiation used by the reconstruction."""
    return _fd_derivative(values, grid, order=order)


# ---------------------------------------------------------------------------
# transport matrices P(+/-), their row-module variants, and corrections T(+/-)

def transport(coeffs, sign, star=False, tol=None):
    """Solve P' = sign*Q1*P (or star: P' = sign*P*Q1), P(0) = I.

    Returns a MatrixFunction carrying the integrator dense output, so later
    evaluations off the grid keep integrator-grade accuracy.
    """
    if star:
        return transport(coeffs.transpose(), sign, star=False, tol=tol).transpose()
    tol = tol or Tolerances()
    m = coeffs.m
    Q1 = coeffs.Q1

    def rhs(x, P):
        return sign * Q1(x) @ P

    grid = coeffs.grid
    traj = integrate_ivp(rhs, np.eye(m, dtype=complex), grid[0], grid[-1],
                         rtol=tol.rtol, atol=tol.atol, t_eval=grid, method=tol.method)
    values = traj.y
    deriv = sign * Q1(grid) @ values
    return MatrixFunction(grid, values, deriv=deriv, dense=traj.dense)


def transport_correction(coeffs, sign, P=None, tol=None):
    """Solve T' = sign*Q1*T + (1/2i)(Q1' + sign*(Q1^2 + Q0))*P, T(xmax) = 0.

    The terminal condition is imposed at xmax in place of infinity; the
    pencil's tail-decay check bounds the induced error.  Integration runs
    backwards from xmax, which is the stable direction here.
    """
    tol = tol or Tolerances()
    if P is None:
        P = transport(coeffs, sign, tol=tol)
    m = coeffs.m
    Q1, Q0 = coeffs.Q1, coeffs.Q0
    halfi = 1.0 / 2.0j

    def rhs(x, T):
        q1 = Q1(x)
        src = Q1.derivative(x) + sign * (q1 @ q1 + Q0(x))
        return sign * q1 @ T + halfi * src @ P(x)

    grid = coeffs.grid
    traj = integrate_ivp(rhs, np.zeros((m, m), dtype=complex), grid[-1], grid[0],
                         rtol=tol.rtol, atol=tol.atol, t_eval=grid[::-1], method=tol.method)
    values = traj.y[::-1]
    q1g = Q1(grid)
    deriv = sign * q1g @ values + halfi * (Q1.derivative(grid) + sign * (q1g @ q1g + Q0(grid))) @ P(grid)
    return MatrixFunction(grid, values, deriv=deriv)


# ---------------------------------------------------------------------------
# base solutions of the pencil equation

def _second_order_rhs(coeffs, rhos):
    """RHS for the stacked first-order form of the pencil equation.

    State shape: (B, 2, m, m) holding (Y, Y') per batched rho.
    """
    rhos = np.asarray(rhos, dtype=complex)
    Q1, Q0 = coeffs.Q1, coeffs.Q0
    rho2 = (rhos ** 2)[:, None, None]
    two_i_rho = (2j * rhos)[:, None, None]

    def rhs(x, state):
        Y = state[:, 0]
        Yp = state[:, 1]
        q1 = Q1(x)
        q0 = Q0(x)
        Ypp = -(rho2 * Y + two_i_rho * (q1 @ Y) + q0 @ Y)
        return np.stack([Yp, Ypp], axis=1)

    return rhs


def _base_initial(coeffs, rhos, kind):
    """Initial data (Y(0), Y'(0)) for the base solutions, plus rho-derivatives."""
    m = coeffs.m
    B = len(rhos)
    eye = np.broadcast_to(np.eye(m, dtype=complex), (B, m, m)).copy()
    zero = np.zeros((B, m, m), dtype=complex)
    if kind == "bc":
        # value I at 0; slope fixed by the boundary form
        Y0 = eye
        Yp0 = -(1j * np.asarray(rhos, dtype=complex)[:, None, None] * coeffs.h1 + coeffs.h0) @ np.eye(m)
        Yp0 = np.broadcast_to(Yp0, (B, m, m)).copy()
        dY0 = zero.copy()
        dYp0 = np.broadcast_to(-1j * coeffs.h1, (B, m, m)).copy()
    elif kind == "sine":
        Y0, Yp0 = zero.copy(), eye
        dY0, dYp0 = zero.copy(), zero.copy()
    else:
        raise ValueError(f"unknown base solution kind {kind!r}")
    return Y0, Yp0, dY0, dYp0


def base_fields(coeffs, rhos, kind="bc", grid=None, with_rho_derivative=False, tol=None):
    """Batched base solutions on the grid.

    Returns (Y, Yp) or (Y, Yp, dY, dYp), each of shape (B, n, m, m), where
    ``d`` denotes the derivative with respect to rho.  ``kind``:

    * ``"bc"``   -- value I at 0, slope satisfying the boundary condition;
    * ``"sine"`` -- value 0 at 0, unit slope.

    Star (row-module) variants are obtained by calling this on
    ``coeffs.transpose()`` and transposing the outputs.
    """
    tol = tol or Tolerances()
    rhos = np.asarray(rhos, dtype=complex)
    grid = coeffs.grid if grid is None else np.asarray(grid, dtype=float)
    B = rhos.size
    m = coeffs.m
    Y0, Yp0, dY0, dYp0 = _base_initial(coeffs, rhos, kind)

    if with_rho_derivative:
        state0 = np.stack([Y0, Yp0, dY0, dYp0], axis=1)
        rho2 = (rhos ** 2)[:, None, None]
        two_i_rho = (2j * rhos)[:, None, None]
        two_rho = (2.0 * rhos)[:, None, None]
        Q1, Q0 = coeffs.Q1, coeffs.Q0

        def rhs(x, state):
            Y, Yp, D, Dp = state[:, 0], state[:, 1], state[:, 2], state[:, 3]
            q1 = Q1(x)
            q0 = Q0(x)
            Ypp = -(rho2 * Y + two_i_rho * (q1 @ Y) + q0 @ Y)
            Dpp = -(rho2 * D + two_i_rho * (q1 @ D) + q0 @ D) - (two_rho * Y + 2j * (q1 @ Y))
            return np.stack([Yp, Ypp, Dp, Dpp], axis=1)
    else:
        state0 = np.stack([Y0, Yp0], axis=1)
        rhs = _second_order_rhs(coeffs, rhos)

    traj = integrate_ivp(rhs, state0, grid[0], grid[-1], rtol=tol.rtol, atol=tol.atol,
                         t_eval=grid, method=tol.method)
    y = np.moveaxis(traj.y, 0, 1)          # (B, n, blocks, m, m)
    if with_rho_derivative:
        return y[:, :, 0], y[:, :, 1], y[:, :, 2], y[:, :, 3]
    return y[:, :, 0], y[:, :, 1]


def base_solution(coeffs, rho, kind="bc", grid=None, tol=None):
    """Single base solution as a SolutionField.

    ``kind`` accepts "bc", "sine", "bc_star", "sine_star"; the star variants
    solve the transposed pencil and transpose the result.
    """
    if kind.endswith("_star"):
        f = base_solution(coeffs.transpose(), rho, kind[:-5], grid=grid, tol=tol)
        return SolutionField(rho, f.grid, f.Y.transpose(0, 2, 1), f.Yprime.transpose(0, 2, 1))
    grid = coeffs.grid if grid is None else np.asarray(grid, dtype=float)
    Y, Yp = base_fields(coeffs, np.array([rho]), kind=kind, grid=grid, tol=tol)
    return SolutionField(complex(rho), grid, Y[0], Yp[0])


def bracket(Z, Y, Zp, Yp):
    """Lagrange-type bracket Z'Y - ZY' of a row-module and a column solution."""
    return Zp @ Y - Z @ Yp


def ell_residual(coeffs, field):
    """Max relative residual of the pencil equation along the grid.

    Uses a 4th-order finite-difference second derivative, so the attainable
    floor scales like (|rho| * h)^4.
    """
    x = field.grid
    Ypp = _fd_derivative(field.Y, x, order=2)
    q1 = coeffs.Q1(x)
    q0 = coeffs.Q0(x)
    rho = field.rho
    res = Ypp + (rho ** 2) * field.Y + 2j * rho * (q1 @ field.Y) + q0 @ field.Y
    scale = max(float(matrix_norm(field.Y).max()) * abs(rho) ** 2, 1e-30)
    return float(matrix_norm(res[3:-3]).max() / scale)
