"""Assembly and solution of the main linear equation of the inverse problem.

For each abscissa x the reconstruction solves a second-kind linear system on
the contour: the unknown z(x, .) (row module) satisfies

    z(x, rho) + (1/2 pi i) int z(x, theta) Mhat(theta) Dt(x, rho, theta) dtheta
        = phi_model(x, rho),

where Dt is the divided Wronskian of the model's row/column solutions and
Mhat is the Weyl-matrix difference between data and model.  The star system
mirrors it with the kernel acting from the left.  Nystrom collocation at the
quadrature nodes turns each into a dense system whose reciprocal condition
number doubles as the solvability flag of the theory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve, get_lapack_funcs

from .contour import Contour
from .errors import WeylPencilError
from .ode import Tolerances, base_fields, integrate_ivp
from .pencil import matrix_norm
from .weyl import WeylEngine, weyl_contour_samples

__all__ = [
    "PencilContourData",
    "prepare_contour_data",
    "kernel_D",
    "MainSystem",
    "assemble_system",
    "solve_main",
    "solve_main_star",
    "MainEqSolution",
    "solve_main_equations",
    "evaluate_z_at",
    "build_w",
    "build_w_star",
]

_COINCIDENT = 1e-8


@dataclass
class PencilContourData:
    """Solution trajectories of one pencil on (x-grid) x (contour nodes).

    Carries the boundary-normalized solutions, their rho-derivatives (for
    the kernel diagonal), the star counterparts, Weyl samples at the nodes,
    and Weyl/base trajectories at off-contour reference points.
    """

    coeffs: object
    contour: Contour
    grid: np.ndarray
    phi: np.ndarray            # (Nx, Nn, m, m)
    phi_p: np.ndarray
    dphi: np.ndarray
    dphi_p: np.ndarray
    phis: np.ndarray           # star fields
    phis_p: np.ndarray
    dphis: np.ndarray
    dphis_p: np.ndarray
    weyl: np.ndarray           # (Nn, m, m) Weyl matrix at the nodes
    rho_refs: np.ndarray       # (K,)
    phi_ref: np.ndarray        # (Nx, K, m, m)
    phi_ref_p: np.ndarray
    phis_ref: np.ndarray
    phis_ref_p: np.ndarray
    Phi_ref: np.ndarray        # Weyl solutions at the references
    Phi_ref_p: np.ndarray
    Phis_ref: np.ndarray
    Phis_ref_p: np.ndarray
    engine: WeylEngine
    Q1_grid: np.ndarray = None     # (Nx, m, m) first-order coefficient samples
    Q1p_grid: np.ndarray = None

    @property
    def m(self):
        return self.coeffs.m

    @property
    def n_nodes(self):
        return self.contour.size


def prepare_contour_data(coeffs, contour, rho_refs=(), engine=None, tol=None):
    """Solve every trajectory the main equation needs for one pencil."""
    tol = tol or Tolerances()
    engine = engine or WeylEngine(coeffs, tol=tol)
    grid = coeffs.grid
    nodes = contour.rho

    Y, Yp, dY, dYp = base_fields(coeffs, nodes, kind="bc", grid=grid,
                                 with_rho_derivative=True, tol=tol)
    ct = coeffs.transpose()
    Ys, Ysp, dYs, dYsp = base_fields(ct, nodes, kind="bc", grid=grid,
                                     with_rho_derivative=True, tol=tol)

    def xmaj(a):
        return np.ascontiguousarray(np.moveaxis(a, 0, 1))

    def xmaj_t(a):
        return np.ascontiguousarray(np.moveaxis(a, 0, 1).swapaxes(-1, -2))

    weyl = weyl_contour_samples(coeffs, contour, engine=engine).values

    rho_refs = np.asarray(rho_refs, dtype=complex)
    K = rho_refs.size
    Nx = grid.size
    m = coeffs.m
    if K:
        rY, rYp = base_fields(coeffs, rho_refs, kind="bc", grid=grid, tol=tol)
        rYs, rYsp = base_fields(ct, rho_refs, kind="bc", grid=grid, tol=tol)
        Phi = np.zeros((Nx, K, m, m), dtype=complex)
        Phi_p = np.zeros_like(Phi)
        Phis = np.zeros_like(Phi)
        Phis_p = np.zeros_like(Phi)
        for k, rr in enumerate(rho_refs):
            f = engine.weyl_solution_field(rr)
            Phi[:, k], Phi_p[:, k] = f.Y, f.Yprime
            fs = engine.weyl_solution_field(rr, star=True)
            Phis[:, k], Phis_p[:, k] = fs.Y, fs.Yprime
        ref = (xmaj(rY), xmaj(rYp), xmaj_t(rYs), xmaj_t(rYsp), Phi, Phi_p, Phis, Phis_p)
    else:
        z = np.zeros((Nx, 0, m, m), dtype=complex)
        ref = (z, z, z, z, z, z, z, z)

    return PencilContourData(
        coeffs, contour, grid,
        xmaj(Y), xmaj(Yp), xmaj(dY), xmaj(dYp),
        xmaj_t(Ys), xmaj_t(Ysp), xmaj_t(dYs), xmaj_t(dYsp),
        weyl, rho_refs, *ref, engine=engine,
        Q1_grid=coeffs.Q1(grid), Q1p_grid=coeffs.Q1.derivative(grid))


def _bracket_pair(Zs, Zs_p, Y, Yp):
    """<Z, Y> = Z'Y - ZY' for stacks (..., m, m) with broadcast."""
    return Zs_p @ Y - Zs @ Yp


def _divided_wronskian_grid(data, ix):
    """Dt[j, i] = <phi*(theta_j), phi(rho_i)> / (rho_i - theta_j) at x-index ix.

    Coincident pairs take the exact limit via the rho-derivative fields.
    """
    nodes = data.contour.rho
    ps, psp = data.phis[ix], data.phis_p[ix]
    p, pp = data.phi[ix], data.phi_p[ix]
    num = np.einsum("jab,ibc->jiac", psp, p) - np.einsum("jab,ibc->jiac", ps, pp)
    den = nodes[None, :] - nodes[:, None]
    close = np.abs(den) < _COINCIDENT
    den_safe = np.where(close, 1.0, den)
    D = num / den_safe[:, :, None, None]
    if np.any(close):
        diag = _bracket_pair(ps, psp, data.dphi[ix], data.dphi_p[ix])
        jj, ii = np.nonzero(close)
        D[jj, ii] = diag[jj]
    return D


def _divided_wronskian_star_grid(data, ix):
    """Dt*[i, j] = <phi*(rho_i), phi(theta_j)> / (rho_i - theta_j)."""
    nodes = data.contour.rho
    ps, psp = data.phis[ix], data.phis_p[ix]
    p, pp = data.phi[ix], data.phi_p[ix]
    num = np.einsum("iab,jbc->ijac", psp, p) - np.einsum("iab,jbc->ijac", ps, pp)
    den = nodes[:, None] - nodes[None, :]
    close = np.abs(den) < _COINCIDENT
    den_safe = np.where(close, 1.0, den)
    D = num / den_safe[:, :, None, None]
    if np.any(close):
        diag = _bracket_pair(data.dphis[ix], data.dphis_p[ix], p, pp)
        ii, jj = np.nonzero(close)
        D[ii, jj] = diag[ii]
    return D


def kernel_D(coeffs, x, rho, theta, form="auto", tol=None):
    """Divided Wronskian D(x, rho, theta) of the row/column solutions.

    ``form`` selects the representation: "divided" evaluates
    <phi*(x,theta), phi(x,rho)>/(rho - theta); "integral" accumulates
    i h1 + int_0^x phi*(s,theta) ((rho+theta) I + 2 i Q1(s)) phi(s,rho) ds
    as an augmented Cauchy problem (exact at theta == rho); "auto" switches
    to the integral form when |rho - theta| < 0.1.
    """
    tol = tol or Tolerances()
    rho_c, th_c = complex(rho), complex(theta)
    if form == "auto":
        form = "integral" if abs(rho_c - th_c) < 0.1 else "divided"
    x = float(x)
    m = coeffs.m
    if form == "divided":
        if abs(rho_c - th_c) < _COINCIDENT:
            raise WeylPencilError("divided form is singular at rho == theta")
        grid = np.array([0.0, x]) if x > 0 else np.array([0.0])
        Y, Yp = base_fields(coeffs, np.array([rho_c]), kind="bc",
                            grid=coeffs.grid, tol=tol)
        Ys, Ysp = base_fields(coeffs.transpose(), np.array([th_c]), kind="bc",
                              grid=coeffs.grid, tol=tol)
        ix = int(np.argmin(np.abs(coeffs.grid - x)))
        if abs(coeffs.grid[ix] - x) > 1e-12:
            raise WeylPencilError("divided form expects x on the pencil grid")
        num = _bracket_pair(Ys[0, ix].T, Ysp[0, ix].T, Y[0, ix], Yp[0, ix])
        return num / (rho_c - th_c)
    if form != "integral":
        raise WeylPencilError(f"unknown kernel form {form!r}")

    Q1 = coeffs.Q1
    h1 = coeffs.h1
    ct = coeffs.transpose()

    def rhs(s, state):
        Y, Yp, Zt, Ztp, W = state
        q1 = Q1(s)
        q1t = ct.Q1(s)
        q0 = coeffs.Q0(s)
        q0t = ct.Q0(s)
        Ypp = -((rho_c ** 2) * Y + 2j * rho_c * (q1 @ Y) + q0 @ Y)
        Ztpp = -((th_c ** 2) * Zt + 2j * th_c * (q1t @ Zt) + q0t @ Zt)
        Wp = Zt.T @ (((rho_c + th_c) * np.eye(m) + 2j * q1) @ Y)
        return np.stack([Yp, Ypp, Ztp, Ztpp, Wp])

    eye = np.eye(m, dtype=complex)
    Y0 = eye.copy()
    Yp0 = -(1j * rho_c * coeffs.h1 + coeffs.h0)
    Z0 = eye.copy()
    Zp0 = -(1j * th_c * ct.h1 + ct.h0)
    W0 = 1j * h1
    state0 = np.stack([Y0, Yp0, Z0, Zp0, W0])
    if x == 0.0:
        return W0
    traj = integrate_ivp(rhs, state0, 0.0, x, rtol=tol.rtol, atol=tol.atol,
                         method=tol.method)
    return traj.y[-1, 4]


@dataclass
class MainSystem:
    """Dense Nystrom discretization of both main equations at one abscissa."""

    x: float
    ix: int
    contour: Contour
    m: int
    A_row: np.ndarray        # (Nn*m, Nn*m): acts on the row-module unknown
    A_star: np.ndarray
    _lu_row: tuple = None
    _lu_star: tuple = None
    _rcond_row: float = None
    _rcond_star: float = None

    def _factor(self, which):
        A = self.A_row if which == "row" else self.A_star
        lu = lu_factor(A)
        gecon = get_lapack_funcs("gecon", (A,))
        rcond, _ = gecon(lu[0], np.linalg.norm(A, 1))
        if which == "row":
            self._lu_row, self._rcond_row = lu, float(rcond)
        else:
            self._lu_star, self._rcond_star = lu, float(rcond)

    def lu(self, which):
        if which == "row" and self._lu_row is None:
            self._factor("row")
        if which == "star" and self._lu_star is None:
            self._factor("star")
        return self._lu_row if which == "row" else self._lu_star

    def rcond(self, which):
        self.lu(which)
        return self._rcond_row if which == "row" else self._rcond_star

    @property
    def condition_number(self):
        return 1.0 / max(self.rcond("row"), 1e-300)


def assemble_system(model_data, weyl_diff, ix):
    """Nystrom matrices of the main equation and its star mirror at grid[ix].

    ``weyl_diff`` holds Mhat at the contour nodes of the model data.
    """
    contour = model_data.contour
    Nn, m = contour.size, model_data.m
    w = contour.weight / (2j * np.pi)
    Dt = _divided_wronskian_grid(model_data, ix)          # (j, i, m, m)
    rt = np.einsum("jab,jibc->jiac", weyl_diff, Dt)       # Mhat(theta_j) Dt[j,i]
    # row system: A2[(i,b),(j,c)] = delta + w_j rt[j,i][c,b]
    K = np.einsum("j,jicb->ibjc", w, rt)
    A_row = K.reshape(Nn * m, Nn * m)
    A_row[np.arange(Nn * m), np.arange(Nn * m)] += 1.0

    Dts = _divided_wronskian_star_grid(model_data, ix)    # (i, j, m, m)
    vt = np.einsum("ijab,jbc->ijac", Dts, weyl_diff)      # Dt*[i,j] Mhat(theta_j)
    Ks = np.einsum("j,ijac->iajc", w, vt)
    A_star = (-Ks).reshape(Nn * m, Nn * m)
    A_star[np.arange(Nn * m), np.arange(Nn * m)] += 1.0
    return MainSystem(float(model_data.grid[ix]), ix, contour, m, A_row, A_star)


def solve_main(system, rhs):
    """Solve the row-module main equation; rhs is phi_model(x, nodes).

    Returns (z, rcond): z has shape (Nn, m, m); rcond is the reciprocal
    condition estimate of the discrete operator (solvability flag source).
    """
    Nn, m = rhs.shape[0], system.m
    B = rhs.transpose(0, 2, 1).reshape(Nn * m, m)
    X = lu_solve(system.lu("row"), B)
    z = X.reshape(Nn, m, m).transpose(0, 2, 1)
    return z, system.rcond("row")


def solve_main_star(system, rhs):
    """Solve the star main equation; rhs is phi*_model(x, nodes)."""
    Nn, m = rhs.shape[0], system.m
    B = rhs.reshape(Nn * m, m)
    X = lu_solve(system.lu("star"), B)
    return X.reshape(Nn, m, m), system.rcond("star")


@dataclass
class MainEqSolution:
    """Main-equation solutions over the x-grid, plus reference evaluations.

    All x-derivatives (suffix ``p``/``pp``) come from re-solving the
    differentiated discrete system with the same LU factors, using the exact
    derivative of the divided Wronskian; no grid differentiation is involved.
    """

    grid: np.ndarray
    contour: Contour
    rho_refs: np.ndarray
    z: np.ndarray            # (Nx, Nn, m, m)
    zstar: np.ndarray
    zp: np.ndarray
    zstarp: np.ndarray
    z_ref: np.ndarray        # (Nx, K, m, m)
    zp_ref: np.ndarray
    zpp_ref: np.ndarray
    zstar_ref: np.ndarray
    zstarp_ref: np.ndarray
    zstarpp_ref: np.ndarray
    w_ref: np.ndarray
    wp_ref: np.ndarray
    wstar_ref: np.ndarray
    wstarp_ref: np.ndarray
    wstarpp_ref: np.ndarray
    rcond: np.ndarray        # (Nx,)
    rcond_star: np.ndarray
    solvable: np.ndarray     # bool (Nx,)
    cancellation_digits: float = 0.0

    def window(self, sl):
        """Slice every x-indexed array; shared metadata is reused."""
        args = [self.grid[sl], self.contour, self.rho_refs]
        for name in ("z", "zstar", "zp", "zstarp", "z_ref", "zp_ref", "zpp_ref",
                     "zstar_ref", "zstarp_ref", "zstarpp_ref", "w_ref", "wp_ref",
                     "wstar_ref", "wstarp_ref", "wstarpp_ref", "rcond",
                     "rcond_star", "solvable"):
            args.append(getattr(self, name)[sl])
        return MainEqSolution(*args, cancellation_digits=self.cancellation_digits)


def _pencil_rhs_matrix(model_data, ix, rhos, vals):
    """phi'' of the model at given rho from the model equation itself."""
    q1 = model_data.Q1_grid[ix]
    q0 = model_data.coeffs.Q0(model_data.grid[ix])
    rr = rhos[:, None, None]
    return -((rr ** 2) * vals + 2j * rr * (q1 @ vals) + q0 @ vals)


def _pencil_rhs_matrix_star(model_data, ix, rhos, vals):
    q1 = model_data.Q1_grid[ix]
    q0 = model_data.coeffs.Q0(model_data.grid[ix])
    rr = rhos[:, None, None]
    return -((rr ** 2) * vals + 2j * rr * (vals @ q1) + vals @ q0)


def _kernel_and_derivatives(model_data, ix, rhos, vals, vals_p, star=False):
    """Divided Wronskian against reference solutions with exact x-derivatives.

    Returns (Dt, Dt', Dt'') of shapes (Nn, K, m, m) for the row kernel or
    (K, Nn, m, m) for the star one.  The derivative of the bracket of two
    solutions collapses to phi*(theta) ((rho+theta) I + 2 i Q1) phi(rho),
    finite at coincident spectral points.
    """
    nodes = model_data.contour.rho
    q1 = model_data.Q1_grid[ix]
    q1p = model_data.Q1p_grid[ix]
    if not star:
        ps, psp = model_data.phis[ix], model_data.phis_p[ix]
        num = np.einsum("jab,kbc->jkac", psp, vals) - np.einsum("jab,kbc->jkac", ps, vals_p)
        den = rhos[None, :] - nodes[:, None]
        # coincident pairs only occur when rhos are the nodes themselves, in
        # which case the undivided kernel is unused downstream
        den = np.where(np.abs(den) < _COINCIDENT, 1.0, den)[:, :, None, None]
        Dt = num / den
        mid = ((rhos[None, :] + nodes[:, None])[:, :, None, None]
               * np.eye(model_data.m) + 2j * q1)
        Dtp = np.einsum("jab,jkbc,kcd->jkad", ps, mid, vals, optimize=True)
        Dtpp = (np.einsum("jab,jkbc,kcd->jkad", psp, mid, vals, optimize=True)
                + np.einsum("jab,jkbc,kcd->jkad", ps, mid, vals_p, optimize=True)
                + 2j * np.einsum("jab,bc,kcd->jkad", ps, q1p, vals, optimize=True))
        return Dt, Dtp, Dtpp
    p, pp = model_data.phi[ix], model_data.phi_p[ix]
    num = np.einsum("kab,jbc->kjac", vals_p, p) - np.einsum("kab,jbc->kjac", vals, pp)
    den = rhos[:, None] - nodes[None, :]
    den = np.where(np.abs(den) < _COINCIDENT, 1.0, den)[:, :, None, None]
    Dts = num / den
    mid = ((rhos[:, None] + nodes[None, :])[:, :, None, None]
           * np.eye(model_data.m) + 2j * q1)
    Dtsp = -np.einsum("kab,kjbc,jcd->kjad", vals, mid, p, optimize=True)
    Dtspp = -(np.einsum("kab,kjbc,jcd->kjad", vals_p, mid, p, optimize=True)
              + np.einsum("kab,kjbc,jcd->kjad", vals, mid, pp, optimize=True)
              + 2j * np.einsum("kab,bc,jcd->kjad", vals, q1p, p, optimize=True))
    return Dts, Dtsp, Dtspp


def evaluate_z_at(model_data, weyl_diff, z_nodes, ix, rhos, vals, vals_p, star=False):
    """Nystrom post-evaluation of z (or z*) at off-contour rho."""
    w = model_data.contour.weight / (2j * np.pi)
    if not star:
        Dt, _, _ = _kernel_and_derivatives(model_data, ix, rhos, vals, vals_p)
        term = np.einsum("j,jab,jbc,jkcd->kad", w, z_nodes, weyl_diff, Dt)
        return vals - term
    Dts, _, _ = _kernel_and_derivatives(model_data, ix, rhos, vals, vals_p, star=True)
    term = np.einsum("j,kjab,jbc,jcd->kad", w, Dts, weyl_diff, z_nodes)
    return vals + term


def build_w(model_data, weyl_diff, z_nodes, ix):
    """Weyl-side companion w(x, rho_ref) from the solved z at one abscissa."""
    Dt, _, _ = _kernel_and_derivatives(model_data, ix, model_data.rho_refs,
                                       model_data.Phi_ref[ix], model_data.Phi_ref_p[ix])
    w = model_data.contour.weight / (2j * np.pi)
    term = np.einsum("j,jab,jbc,jkcd->kad", w, z_nodes, weyl_diff, Dt)
    return model_data.Phi_ref[ix] - term


def build_w_star(model_data, weyl_diff, zstar_nodes, ix):
    """Star companion w*(x, rho_ref) from the solved z* at one abscissa."""
    Dts, _, _ = _kernel_and_derivatives(model_data, ix, model_data.rho_refs,
                                        model_data.Phis_ref[ix], model_data.Phis_ref_p[ix],
                                        star=True)
    w = model_data.contour.weight / (2j * np.pi)
    term = np.einsum("j,kjab,jbc,jcd->kad", w, Dts, weyl_diff, zstar_nodes)
    return model_data.Phis_ref[ix] + term


def solve_main_equations(model_data, weyl_diff, ix_list=None, rcond_min=1e-8):
    """Assemble and solve both main equations along the grid.

    Returns a MainEqSolution with exact first (and, at the references,
    second) x-derivatives obtained by re-solving the differentiated system.
    Abscissas whose reciprocal condition estimate falls below ``rcond_min``
    are flagged unsolvable (their z is still the least-garbage LU solve, but
    downstream steps must not trust it).
    """
    grid = model_data.grid
    contour = model_data.contour
    Nn, m = contour.size, model_data.m
    if ix_list is None:
        ix_list = range(grid.size)
    ix_list = list(ix_list)
    Nx = grid.size
    K = model_data.rho_refs.size
    w = contour.weight / (2j * np.pi)
    nodes = contour.rho

    def zeros(*shape):
        return np.zeros(shape, dtype=complex)

    z, zs, zp, zsp = (zeros(Nx, Nn, m, m) for _ in range(4))
    ref_arrays = [zeros(Nx, K, m, m) for _ in range(11)]
    (z_ref, zp_ref, zpp_ref, zs_ref, zsp_ref, zspp_ref,
     w_ref, wp_ref, ws_ref, wsp_ref, wspp_ref) = ref_arrays
    rcond = np.zeros(Nx)
    rcond_s = np.zeros(Nx)
    solvable = np.zeros(Nx, dtype=bool)
    worst_cancel = 0.0

    eye = np.eye(m)
    for ix in ix_list:
        system = assemble_system(model_data, weyl_diff, ix)
        zx, rc = solve_main(system, model_data.phi[ix])
        zsx, rcs = solve_main_star(system, model_data.phis[ix])
        # exact-derivative right-hand sides: the kernel derivative is
        # phi*(theta) ((rho+theta) I + 2 i Q1) phi(rho), separable in
        # (theta, rho), so every node contraction reduces to rank-type sums
        phx, phpx = model_data.phi[ix], model_data.phi_p[ix]
        psx, pspx = model_data.phis[ix], model_data.phis_p[ix]
        q1 = model_data.Q1_grid[ix]
        q1p = model_data.Q1p_grid[ix]
        twoq = 2j * q1
        twoqp = 2j * q1p
        rr = nodes[:, None, None]

        za = np.einsum("j,jab,jbc,jcd->jad", w, zx, weyl_diff, psx)
        A0, A1 = za.sum(axis=0), (nodes[:, None, None] * za).sum(axis=0)
        rhs1 = phpx - (rr * (A0 @ phx) + A1 @ phx + A0 @ twoq @ phx)
        zpx, _ = solve_main(system, rhs1)

        az = np.einsum("j,jab,jbc,jcd->jad", w, phx, weyl_diff, zsx)
        G0, G1 = az.sum(axis=0), (nodes[:, None, None] * az).sum(axis=0)
        rhs1s = pspx - (rr * (psx @ G0) + psx @ G1 + psx @ twoq @ G0)
        zspx, _ = solve_main_star(system, rhs1s)

        zb = np.einsum("j,jab,jbc,jcd->jad", w, zpx, weyl_diff, psx)
        B0, B1 = zb.sum(axis=0), (nodes[:, None, None] * zb).sum(axis=0)
        zc = np.einsum("j,jab,jbc,jcd->jad", w, zx, weyl_diff, pspx)
        C0, C1 = zc.sum(axis=0), (nodes[:, None, None] * zc).sum(axis=0)
        phipp = _pencil_rhs_matrix(model_data, ix, nodes, phx)
        rhs2 = (phipp
                - 2.0 * (rr * (B0 @ phx) + B1 @ phx + B0 @ twoq @ phx)
                - (rr * (C0 @ phx) + C1 @ phx + C0 @ twoq @ phx)
                - (rr * (A0 @ phpx) + A1 @ phpx + A0 @ twoq @ phpx)
                - A0 @ twoqp @ phx)
        zppx, _ = solve_main(system, rhs2)

        hz = np.einsum("j,jab,jbc,jcd->jad", w, phx, weyl_diff, zspx)
        H0, H1 = hz.sum(axis=0), (nodes[:, None, None] * hz).sum(axis=0)
        gz = np.einsum("j,jab,jbc,jcd->jad", w, phpx, weyl_diff, zsx)
        Gp0, Gp1 = gz.sum(axis=0), (nodes[:, None, None] * gz).sum(axis=0)
        phispp = _pencil_rhs_matrix_star(model_data, ix, nodes, psx)
        rhs2s = (phispp
                 - 2.0 * (rr * (psx @ H0) + psx @ H1 + psx @ twoq @ H0)
                 - (rr * (pspx @ G0) + pspx @ G1 + pspx @ twoq @ G0)
                 - (rr * (psx @ Gp0) + psx @ Gp1 + psx @ twoq @ Gp0)
                 - psx @ twoqp @ G0)
        zsppx, _ = solve_main_star(system, rhs2s)

        z[ix], zs[ix], zp[ix], zsp[ix] = zx, zsx, zpx, zspx
        rcond[ix], rcond_s[ix] = rc, rcs
        solvable[ix] = (rc > rcond_min) and (rcs > rcond_min)
        worst_cancel = max(worst_cancel, np.log10(max(np.abs(system.A_row).max(), 1.0)))
        if not K:
            continue

        rhos = model_data.rho_refs
        rDt, rDtp, rDtpp = _kernel_and_derivatives(model_data, ix, rhos,
                                                   model_data.phi_ref[ix],
                                                   model_data.phi_ref_p[ix])
        mix = lambda za, Dk: np.einsum("j,jab,jbc,jkcd->kad", w, za, weyl_diff, Dk)
        z_ref[ix] = model_data.phi_ref[ix] - mix(zx, rDt)
        zp_ref[ix] = model_data.phi_ref_p[ix] - mix(zpx, rDt) - mix(zx, rDtp)
        ref_pp = _pencil_rhs_matrix(model_data, ix, rhos, model_data.phi_ref[ix])
        zpp_ref[ix] = ref_pp - mix(zppx, rDt) - 2.0 * mix(zpx, rDtp) - mix(zx, rDtpp)

        rDts, rDtsp, rDtspp = _kernel_and_derivatives(model_data, ix, rhos,
                                                      model_data.phis_ref[ix],
                                                      model_data.phis_ref_p[ix], star=True)
        mixs = lambda Dk, za: np.einsum("j,kjab,jbc,jcd->kad", w, Dk, weyl_diff, za)
        zs_ref[ix] = model_data.phis_ref[ix] + mixs(rDts, zsx)
        zsp_ref[ix] = model_data.phis_ref_p[ix] + mixs(rDts, zspx) + mixs(rDtsp, zsx)
        refs_pp = _pencil_rhs_matrix_star(model_data, ix, rhos, model_data.phis_ref[ix])
        zspp_ref[ix] = refs_pp + mixs(rDts, zsppx) + 2.0 * mixs(rDtsp, zspx) + mixs(rDtspp, zsx)

        wDt, wDtp, _ = _kernel_and_derivatives(model_data, ix, rhos,
                                               model_data.Phi_ref[ix],
                                               model_data.Phi_ref_p[ix])
        w_ref[ix] = model_data.Phi_ref[ix] - mix(zx, wDt)
        wp_ref[ix] = model_data.Phi_ref_p[ix] - mix(zpx, wDt) - mix(zx, wDtp)

        wDts, wDtsp, wDtspp = _kernel_and_derivatives(model_data, ix, rhos,
                                                      model_data.Phis_ref[ix],
                                                      model_data.Phis_ref_p[ix], star=True)
        ws_ref[ix] = model_data.Phis_ref[ix] + mixs(wDts, zsx)
        wsp_ref[ix] = model_data.Phis_ref_p[ix] + mixs(wDts, zspx) + mixs(wDtsp, zsx)
        Phis_pp = _pencil_rhs_matrix_star(model_data, ix, rhos, model_data.Phis_ref[ix])
        wspp_ref[ix] = Phis_pp + mixs(wDts, zsppx) + 2.0 * mixs(wDtsp, zspx) + mixs(wDtspp, zsx)

    return MainEqSolution(grid, contour, model_data.rho_refs, z, zs, zp, zsp,
                          z_ref, zp_ref, zpp_ref, zs_ref, zsp_ref, zspp_ref,
                          w_ref, wp_ref, ws_ref, wsp_ref, wspp_ref,
                          rcond, rcond_s, solvable, cancellation_digits=worst_cancel)
