"""Recovery of the pencil coefficients from main-equation solutions.

Given z, z*, w, w* the product of the two connection matrices is the
inverse of the bracket z w*' - w z*'; a least-squares use of the Wronskian
identity then isolates the logarithmic derivative a(x) of the connection,
which is integrated back to the connection itself.  The boundary-normalized
solutions phi = connection * z finally yield (Q1, Q0) by collocation of the
pencil equation at the reference spectral points.  All derivatives of z, w
come from the differentiated discrete main equation, not from the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import SingularSystemError, WeylPencilError
from .ode import Tolerances, fd_derivative, integrate_ivp
from .pencil import MatrixFunction, matrix_norm

__all__ = [
    "ConnectionData",
    "omega_product",
    "omega_log_derivative",
    "recover_omega",
    "omega_sqrt_hermitian",
    "extract_potentials",
    "extract_from_solution",
    "spline_project",
]


@dataclass
class ConnectionData:
    """Connection matrices along the grid and how they were obtained."""

    grid: np.ndarray
    product: np.ndarray        # Omega* Omega per node
    a: np.ndarray              # Omega^{-1} Omega' per node
    omega: np.ndarray          # Omega per node
    method: str                # "cauchy-ode" | "hermitian-sqrt"


def omega_product(z_ref, zstar_ref, w_ref, wstar_ref, grid, derivs=None,
                  agreement_tol=1e-3):
    """Product Omega* Omega from the bracket (z w*' - w z*')^{-1}.

    Inputs have shapes (Nx, K, m, m).  ``derivs`` optionally supplies the
    exact x-derivatives (zp_ref, zstarp_ref, wp_ref, wstarp_ref,
    zstarpp_ref, wstarpp_ref); without them the starred factors are
    differentiated on the grid.  Returns (product, product_deriv,
    diagnostics): the bracket is averaged over the reference points, their
    spread is reported, and the identity z w* - w z* = 0 is checked.
    """
    if derivs is None:
        wsp = fd_derivative(wstar_ref, grid)
        zsp = fd_derivative(zstar_ref, grid)
        bracket = z_ref @ wsp - w_ref @ zsp
        bracketp = None
    else:
        zp, zsp_, wp, wsp_, zspp, wspp = derivs
        bracket = z_ref @ wsp_ - w_ref @ zsp_
        bracketp = (zp @ wsp_ + z_ref @ wspp - wp @ zsp_ - w_ref @ zspp)
    sym = z_ref @ wstar_ref - w_ref @ zstar_ref
    sym_scale = max(float(matrix_norm(z_ref @ wstar_ref).max()), 1e-30)
    sym_resid = float(matrix_norm(sym).max() / sym_scale)
    prods = np.linalg.inv(bracket)
    product = prods.mean(axis=1)
    K = z_ref.shape[1]
    spread = float(matrix_norm(prods - product[:, None]).max()) if K > 1 else 0.0
    flagged = bool(K > 1 and spread > agreement_tol
                   * max(1.0, float(matrix_norm(product).max())))
    if bracketp is None:
        product_deriv = fd_derivative(product, grid)
    else:
        dprods = -(prods @ bracketp @ prods)
        product_deriv = dprods.mean(axis=1)
    diag = {"reference_spread": spread, "symmetry_residual": sym_resid,
            "contaminated": flagged}
    return product, product_deriv, diag


def omega_log_derivative(z_nodes, zstar_nodes, product, grid, product_deriv=None,
                         derivs=None, contour=None, node_scale_cap=0.25):
    """Logarithmic derivative a = Omega^{-1} Omega' of the connection.

    Solves for the skew combination Omega*' Omega - Omega* Omega' from the
    Wronskian identity z*(...)z = z* P z' - z*' P z (P = Omega* Omega) by
    least squares over contour nodes, then combines it with the derivative
    of P.  ``derivs`` = (zp_nodes, zstarp_nodes) supplies exact derivatives;
    otherwise grid differentiation restricted to slowly-oscillating nodes
    (|rho| h below ``node_scale_cap``) is used.
    """
    Nx, Nn, m, _ = z_nodes.shape
    h = grid[1] - grid[0]
    if derivs is not None:
        zp_all, zsp_all = derivs
        keep = np.ones(Nn, dtype=bool)
    else:
        if contour is not None:
            keep = np.abs(contour.rho) * h <= node_scale_cap
            if keep.sum() < m * m:
                order = np.argsort(np.abs(contour.rho))[: max(m * m, 8)]
                keep = np.zeros(Nn, dtype=bool)
                keep[order] = True
        else:
            keep = np.ones(Nn, dtype=bool)
        zp_all = fd_derivative(z_nodes, grid)
        zsp_all = fd_derivative(zstar_nodes, grid)
    z = z_nodes[:, keep]
    zs = zstar_nodes[:, keep]
    zp = zp_all[:, keep]
    zsp = zsp_all[:, keep]
    rhs = zs @ product[:, None] @ zp - zsp @ product[:, None] @ z
    nk = z.shape[1]
    # least squares for B in  z* B z = rhs  per grid node;
    # rows (k, a, d), unknowns (b, c): z*[a,b] B[b,c] z[c,d]
    A = np.einsum("xkab,xkcd->xkadbc", zs, z).reshape(Nx, nk * m * m, m * m)
    r = rhs.reshape(Nx, nk * m * m)
    scale = 1.0 / np.maximum(matrix_norm(zs) * matrix_norm(z), 1e-30)   # (Nx, nk)
    A = A * np.repeat(scale, m * m, axis=1)[..., None]
    r = r * np.repeat(scale, m * m, axis=1)
    B = np.zeros((Nx, m, m), dtype=complex)
    deficient = np.zeros(Nx, dtype=bool)
    for ix in range(Nx):
        sol, _, rank, _ = np.linalg.lstsq(A[ix], r[ix], rcond=None)
        B[ix] = sol.reshape(m, m)
        deficient[ix] = rank < m * m
    dP = fd_derivative(product, grid) if product_deriv is None else product_deriv
    prod_deriv = 0.5 * (dP - B)                     # Omega* Omega'
    a = np.linalg.solve(product, prod_deriv)
    return a, {"rank_deficient": deficient, "nodes_used": int(keep.sum())}


def recover_omega(a_values, grid, start_index=0, omega0=None, tol=None):
    """Integrate Omega' = Omega a(x) from the identity at grid[start_index]."""
    tol = tol or Tolerances()
    m = a_values.shape[-1]
    a_fn = MatrixFunction(grid, a_values)
    omega0 = np.eye(m, dtype=complex) if omega0 is None else omega0

    def rhs(x, Om):
        return Om @ a_fn(x)

    out = np.zeros((grid.size, m, m), dtype=complex)
    out[start_index] = omega0
    if start_index + 1 < grid.size:
        traj = integrate_ivp(rhs, omega0, grid[start_index], grid[-1],
                             rtol=tol.rtol, atol=tol.atol,
                             t_eval=grid[start_index:], method=tol.method)
        out[start_index:] = traj.y
    if start_index > 0:
        traj = integrate_ivp(rhs, omega0, grid[start_index], grid[0],
                             rtol=tol.rtol, atol=tol.atol,
                             t_eval=grid[start_index::-1], method=tol.method)
        out[: start_index + 1] = traj.y[::-1]
    return out


def omega_sqrt_hermitian(product, hermiticity_tol=1e-4):
    """Principal square root of a Hermitian positive-definite product.

    Valid when both transport coefficients are skew-Hermitian, where the
    star connection is the conjugate transpose of the connection.  Raises
    on inputs that are not Hermitian positive-definite within tolerance.
    """
    product = np.asarray(product)
    herm = matrix_norm(product - np.swapaxes(product, -1, -2).conj())
    scale = np.maximum(matrix_norm(product), 1e-30)
    if np.any(herm > hermiticity_tol * scale):
        raise SingularSystemError(
            f"product deviates from Hermitian by {float((herm / scale).max()):.3e}")
    sym = 0.5 * (product + np.swapaxes(product, -1, -2).conj())
    vals, vecs = np.linalg.eigh(sym)
    if np.any(vals <= 0):
        raise SingularSystemError("product is not positive-definite")
    return (vecs * np.sqrt(vals)[..., None, :]) @ np.swapaxes(vecs, -1, -2).conj()


def spline_project(values, grid, knot_every=4):
    """Least-squares projection onto cubic splines with sparse knots.

    Used to discard frequencies far above the physical band of the
    coefficients (the contour quadrature injects noise near its outermost
    node frequency).  Projection, not smoothing: smooth inputs pass through
    with spectral-level bias.
    """
    n = grid.size
    kidx = np.arange(0, n, int(knot_every))
    if kidx[-1] != n - 1:
        kidx = np.append(kidx, n - 1)
    knots = grid[kidx]
    t = np.concatenate([[knots[0]] * 3, knots, [knots[-1]] * 3])
    nb = len(t) - 4
    basis = np.zeros((n, nb))
    for j in range(nb):
        c = np.zeros(nb)
        c[j] = 1.0
        basis[:, j] = BSpline(t, c, 3)(grid)
    flat = np.asarray(values).reshape(n, -1)
    coef, *_ = np.linalg.lstsq(basis, flat, rcond=None)
    return (basis @ coef).reshape(np.shape(values))


def _collocate_potentials(phi, phi_pp, rhos, grid, interior_clip=3):
    rhos = np.asarray(rhos, dtype=complex)
    Nx, K, m, _ = phi.shape
    rhs = -phi_pp - (rhos[None, :, None, None] ** 2) * phi
    C = np.concatenate([2j * rhos[None, :, None, None] * phi, phi], axis=2)
    Cmat = np.concatenate(list(np.moveaxis(C, 1, 0)), axis=-1)      # (Nx, 2m, K*m)
    Rmat = np.concatenate(list(np.moveaxis(rhs, 1, 0)), axis=-1)    # (Nx, m, K*m)
    Q1 = np.zeros((Nx, m, m), dtype=complex)
    Q0 = np.zeros((Nx, m, m), dtype=complex)
    resid = np.zeros(Nx)
    for ix in range(Nx):
        sol, *_ = np.linalg.lstsq(Cmat[ix].T, Rmat[ix].T, rcond=None)
        X = sol.T
        Q1[ix] = X[:, :m]
        Q0[ix] = X[:, m:]
        resid[ix] = float(np.abs(X @ Cmat[ix] - Rmat[ix]).max()
                          / max(np.abs(Rmat[ix]).max(), 1e-30))
    for k in range(min(interior_clip, Nx - 1)):
        Q1[k], Q0[k] = Q1[interior_clip], Q0[interior_clip]
        Q1[Nx - 1 - k], Q0[Nx - 1 - k] = Q1[Nx - 1 - interior_clip], Q0[Nx - 1 - interior_clip]
    return Q1, Q0, resid


def extract_potentials(phi_values, rhos, grid, phi_pp=None, interior_clip=3):
    """Recover (Q1, Q0) from boundary-normalized solutions at K >= 2 rho.

    Collocates the pencil equation: for each grid node the linear system
    2 i rho_k Q1 phi_k + Q0 phi_k = -phi_k'' - rho_k^2 phi_k is solved in
    least squares over k.  Second derivatives are taken on the grid unless
    supplied; a few edge nodes are replicated from the nearest interior
    ones.  Returns (Q1, Q0, per-node residual).
    """
    if phi_values.shape[1] < 2:
        raise WeylPencilError("need at least two reference spectral points")
    if phi_pp is None:
        phi_pp = fd_derivative(phi_values, grid, order=2)
    return _collocate_potentials(phi_values, phi_pp, rhos, grid, interior_clip)


def extract_from_solution(sol, omega, a, grid, interior_clip=3, smooth_knot=4):
    """Potentials from a solved window using the exact derivative chain.

    phi = Omega z and phi'' = Omega[(a' + a^2) z + 2 a z' + z''], where only
    a' is grid-differentiated (after projecting a onto a sparse spline
    space, since a is smooth by construction).  Returns (Q1, Q0, residual).
    """
    a_s = spline_project(a, grid, knot_every=smooth_knot)
    ap = fd_derivative(a_s, grid)
    phi = omega[:, None] @ sol.z_ref
    om = omega[:, None]
    aa = (ap + a_s @ a_s)[:, None]
    phi_pp = om @ (aa @ sol.z_ref + 2.0 * (a_s[:, None] @ sol.zp_ref) + sol.zpp_ref)
    return _collocate_potentials(phi, phi_pp, sol.rho_refs, grid, interior_clip)
