"""Fundamental solutions with prescribed behavior at infinity.

``jost_solution`` builds the solution decaying like e^{i rho x} in the
closed upper half-plane; ``birkhoff_solution`` builds its growing companion
e^{-i rho x}.  Both come from successive approximations of the integral
equations satisfied by the phase-stripped factors, iterated on a per-cell
Gauss mesh with truncation controlled by the explicit envelope bounds
(:func:`compute_aux_bounds`).  Left of the admissibility point ``alpha`` the
solution is continued as a Cauchy problem for the differential equation.

Lower half-plane constructions follow by the reflection rho -> -rho, which
maps the pencil to (Q1, h1) -> (-Q1, -h1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._quad import CellMesh
from .errors import AdmissibilityError
from .ode import SolutionField, Tolerances, integrate_ivp, transport, _second_order_rhs
from .pencil import matrix_norm

__all__ = [
    "AuxiliaryBounds",
    "JostConfig",
    "JostWorkspace",
    "compute_aux_bounds",
    "choose_alpha",
    "jost_solution",
    "birkhoff_solution",
    "jost_batch",
    "birkhoff_batch",
    "phase_stripped_factor",
    "check_independence",
]

_CHUNK = 48


@dataclass(frozen=True)
class AuxiliaryBounds:
    """Envelope functions controlling the successive approximations.

    gronwall : exp of the cumulative norm of Q1 (bounds the transports)
    forcing  : 3 * gronwall * (2|Q1'| + |Q1^2| + |Q0|)
    tail     : integral of forcing*gronwall from x to the domain end,
               nonincreasing with tail(xmax) ~ 0
    """

    grid: np.ndarray
    gronwall: np.ndarray
    forcing: np.ndarray
    tail: np.ndarray

    def tail_at(self, x):
        return float(np.interp(x, self.grid, self.tail))


def compute_aux_bounds(coeffs):
    """Sample the envelope functions on the pencil grid by cumulative quadrature."""
    x = coeffs.grid
    q1 = coeffs.Q1(x)
    nq1 = matrix_norm(q1)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (nq1[1:] + nq1[:-1]) * np.diff(x))])
    gronwall = np.exp(cum)
    forcing = 3.0 * gronwall * (2.0 * matrix_norm(coeffs.Q1.derivative(x))
                                + matrix_norm(q1 @ q1) + matrix_norm(coeffs.Q0(x)))
    integrand = forcing * gronwall
    rev = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(x))])
    tail = rev[-1] - rev
    return AuxiliaryBounds(x, gronwall, forcing, tail)


@dataclass
class JostConfig:
    """Controls for the series construction.

    alpha: force a single left endpoint for the series region (None = pick
    the smallest admissible one per rho); max_iters: iteration cap;
    series_tol: relative tail tolerance of the truncated series.
    """

    alpha: float | None = None
    max_iters: int = 80
    series_tol: float = 1e-13


def admissible_radius(coeffs, aux=None):
    """Per-grid-node admissibility threshold max(4*tail, 2*sup_{t>=x} |Q1|)."""
    aux = aux or compute_aux_bounds(coeffs)
    nq1 = matrix_norm(coeffs.Q1(aux.grid))
    sup_from_right = np.maximum.accumulate(nq1[::-1])[::-1]
    return np.maximum(4.0 * aux.tail, 2.0 * sup_from_right), aux


def choose_alpha(coeffs, rho_abs, aux=None, alpha_cap_frac=0.95):
    """Smallest grid node alpha whose admissibility threshold is below |rho|."""
    thresholds, aux = admissible_radius(coeffs, aux)
    grid = aux.grid
    cap = grid[0] + alpha_cap_frac * (grid[-1] - grid[0])
    ok = np.nonzero(thresholds <= rho_abs)[0]
    if ok.size and grid[ok[0]] <= cap:
        return float(grid[ok[0]]), float(thresholds[ok[0]])
    raise AdmissibilityError(
        f"|rho|={rho_abs:.4g} below the admissibility threshold "
        f"{thresholds.min():.4g} reachable inside x <= {cap:.3g}")


@dataclass
class SeriesDiagnostics:
    iterations: int = 0
    ratios: list = field(default_factory=list)   # per-iteration max norm ratio
    bound_tail: float = 0.0


class _SeriesData:
    """Pencil data sampled on the series mesh of [alpha, xmax]."""

    def __init__(self, coeffs, alpha, refine, q, transports):
        grid = coeffs.grid
        base = grid[grid >= alpha - 1e-12]
        self.alpha = float(base[0])
        self.mesh = CellMesh(base, refine=refine, q=q)
        mesh = self.mesh
        Pm, Pp, Pms, Pps = transports
        pts, bounds = mesh.pts, mesh.bounds
        self.Pm_pts, self.Pm_b = Pm(pts), Pm(bounds)
        self.Pp_pts, self.Pp_b = Pp(pts), Pp(bounds)
        self.Pms_pts = Pms(pts)
        self.Pps_pts = Pps(pts)
        self.Q1_pts = coeffs.Q1(pts)
        self.Q1_b = coeffs.Q1(bounds)
        self.Q1p_pts = coeffs.Q1.derivative(pts)
        self.Q0_pts = coeffs.Q0(pts)
        self.m = coeffs.m


def _series_sweep(data, rhos, kind, series_tol, max_iters):
    """Run successive approximations for a batch of rho sharing one mesh.

    kind = "jost":     phase-stripped factor of the e^{+i rho x} solution;
    kind = "birkhoff": factor of the e^{-i rho x} solution.
    Returns values and derivatives of the factor at the mesh boundaries.
    """
    mesh = data.mesh
    rhos = np.asarray(rhos, dtype=complex)
    B = rhos.size
    m = data.m
    Nc, q = mesh.n_cells, mesh.q
    rho_c = rhos[:, None, None, None, None]

    eye = np.eye(m, dtype=complex)
    Rinv = np.linalg.inv(1j * rho_c * eye - data.Q1_pts[None])   # (B,Nc,q,m,m)

    # phase bookkeeping: stored exponentials keep non-positive real part;
    # the inverted in-cell factors are bounded by the mesh refinement rule
    width = 2.0 * mesh.half
    dec_cell = np.exp(2j * rhos[:, None] * width[None, :])          # (B,Nc)
    toL = mesh.pts - mesh.bounds[:-1][:, None]
    toR = mesh.bounds[1:][:, None] - mesh.pts
    ph_toL = np.exp(2j * rhos[:, None, None] * toL[None])
    ph_toR = np.exp(2j * rhos[:, None, None] * toR[None])
    inv_toL = np.exp(-2j * rhos[:, None, None] * toL[None])
    inv_toR = np.exp(-2j * rhos[:, None, None] * toR[None])

    if kind == "jost":
        Z = np.broadcast_to(data.Pm_pts, (B, Nc, q, m, m)).copy()
        Zp = np.broadcast_to(-data.Q1_pts @ data.Pm_pts, Z.shape).copy()
        val_b = np.broadcast_to(data.Pm_b, (B,) + data.Pm_b.shape).copy()
        der_b = np.broadcast_to(-data.Q1_b @ data.Pm_b, val_b.shape).copy()
        flat_pref_pts, flat_pref_b = data.Pm_pts[None], data.Pm_b[None]
        osc_pref_pts, osc_pref_b = data.Pp_pts[None], data.Pp_b[None]
        flat_weight, osc_weight = data.Pps_pts[None], data.Pms_pts[None]
        rho_sign = +1.0
    elif kind == "birkhoff":
        Z = np.broadcast_to(data.Pp_pts, (B, Nc, q, m, m)).copy()
        Zp = np.broadcast_to(data.Q1_pts @ data.Pp_pts, Z.shape).copy()
        val_b = np.broadcast_to(data.Pp_b, (B,) + data.Pp_b.shape).copy()
        der_b = np.broadcast_to(data.Q1_b @ data.Pp_b, val_b.shape).copy()
        flat_pref_pts, flat_pref_b = data.Pp_pts[None], data.Pp_b[None]
        osc_pref_pts, osc_pref_b = data.Pm_pts[None], data.Pm_b[None]
        flat_weight, osc_weight = data.Pms_pts[None], data.Pps_pts[None]
        rho_sign = -1.0
    else:
        raise ValueError(kind)

    diag = SeriesDiagnostics()
    scale = np.maximum(matrix_norm(Z).reshape(B, -1).max(axis=1), 1e-300)
    prev = scale.copy()
    two_i_rho = (2j * rhos)[:, None, None, None, None]
    two_i_rho_b = (2j * rhos)[:, None, None, None]

    for it in range(1, max_iters + 1):
        V = Rinv @ (data.Q1p_pts[None] @ (Rinv @ (Zp + rho_sign * 1j * rho_c * Z))
                    - (data.Q1_pts @ data.Q1_pts + data.Q0_pts)[None] @ Z)
        g1 = flat_weight @ V
        g2 = osc_weight @ V

        # suffix integral I1(x) = int_x^{xmax} g1
        c1 = mesh.integrate_cells(g1)                               # (B,Nc,m,m)
        S1b = np.zeros((B, Nc + 1, m, m), dtype=complex)
        S1b[:, :-1] = np.cumsum(c1[:, ::-1], axis=1)[:, ::-1]
        I1_in = mesh.partial_right(g1) + S1b[:, 1:][:, :, None]

        if kind == "jost":
            # W(x) = int_x^{xmax} e^{2 i rho (t - x)} g2(t) dt
            gph = ph_toL[..., None, None] * g2
            cW = mesh.integrate_cells(gph)
            Wb = np.zeros((B, Nc + 1, m, m), dtype=complex)
            for c in range(Nc - 1, -1, -1):
                Wb[:, c] = cW[:, c] + dec_cell[:, c, None, None] * Wb[:, c + 1]
            W_in = (inv_toL[..., None, None] * mesh.partial_right(gph)
                    + ph_toR[..., None, None] * Wb[:, 1:][:, :, None])
            Z_new = -0.5 * flat_pref_pts @ I1_in + 0.5 * osc_pref_pts @ W_in
            Zp_new = (0.5 * data.Q1_pts[None] @ flat_pref_pts @ I1_in
                      + 0.5 * (data.Q1_pts[None] - two_i_rho * eye) @ osc_pref_pts @ W_in)
            val_new = -0.5 * flat_pref_b @ S1b + 0.5 * osc_pref_b @ Wb
            der_new = (0.5 * data.Q1_b[None] @ flat_pref_b @ S1b
                       + 0.5 * (data.Q1_b[None] - two_i_rho_b * eye) @ osc_pref_b @ Wb)
        else:
            # W(x) = int_alpha^x e^{2 i rho (x - t)} g2(t) dt
            gph = ph_toR[..., None, None] * g2
            cW = mesh.integrate_cells(gph)
            Wb = np.zeros((B, Nc + 1, m, m), dtype=complex)
            for c in range(Nc):
                Wb[:, c + 1] = dec_cell[:, c, None, None] * Wb[:, c] + cW[:, c]
            W_in = (ph_toL[..., None, None] * Wb[:, :-1][:, :, None]
                    + inv_toR[..., None, None] * mesh.partial_left(gph))
            Z_new = 0.5 * flat_pref_pts @ I1_in + 0.5 * osc_pref_pts @ W_in
            Zp_new = (0.5 * data.Q1_pts[None] @ flat_pref_pts @ I1_in
                      + 0.5 * (two_i_rho * eye - data.Q1_pts[None]) @ osc_pref_pts @ W_in)
            val_new = 0.5 * flat_pref_b @ S1b + 0.5 * osc_pref_b @ Wb
            der_new = (0.5 * data.Q1_b[None] @ flat_pref_b @ S1b
                       + 0.5 * (two_i_rho_b * eye - data.Q1_b[None]) @ osc_pref_b @ Wb)

        Z, Zp = Z_new, Zp_new
        val_b = val_b + val_new
        der_b = der_b + der_new
        size = matrix_norm(Z).reshape(B, -1).max(axis=1)
        diag.iterations = it
        diag.ratios.append(float(np.max(size / np.maximum(prev, 1e-300))))
        prev = np.maximum(size, 1e-300)
        if np.all(size <= series_tol * scale):
            diag.bound_tail = float(np.max(size / scale))
            break
    else:
        raise AdmissibilityError(
            f"series did not converge within {max_iters} iterations "
            f"(worst residual {np.max(size / scale):.3e})")
    return val_b, der_b, diag


def _mesh_refine(rho_abs_max, base_h):
    return max(1, int(np.ceil(rho_abs_max * base_h / 2.0)))


class JostWorkspace:
    """Caches transports, envelopes, and series meshes for one pencil."""

    def __init__(self, coeffs, tol=None):
        self.coeffs = coeffs
        self.tol = tol or Tolerances()
        self.aux = compute_aux_bounds(coeffs)
        self._transports = None
        self._data = {}
        self._base_h = float(np.max(np.diff(coeffs.grid)))

    @property
    def transports(self):
        if self._transports is None:
            c, t = self.coeffs, self.tol
            self._transports = (transport(c, -1.0, tol=t), transport(c, +1.0, tol=t),
                                transport(c, -1.0, star=True, tol=t),
                                transport(c, +1.0, star=True, tol=t))
        return self._transports

    def series_data(self, alpha, refine, q=14):
        key = (round(alpha, 12), int(refine), int(q))
        if key not in self._data:
            self._data[key] = _SeriesData(self.coeffs, alpha, refine, q, self.transports)
        return self._data[key]

    def _plan(self, rhos, cfg):
        """Group rho values by (alpha, refine); returns {key: index array}."""
        rhos = np.asarray(rhos, dtype=complex)
        if cfg.alpha is not None:
            thresholds, _ = admissible_radius(self.coeffs, self.aux)
            thr = float(np.interp(cfg.alpha, self.aux.grid, thresholds))
            bad = np.abs(rhos) < thr
            if np.any(bad):
                raise AdmissibilityError(
                    f"|rho|={np.abs(rhos)[bad].min():.4g} below threshold "
                    f"{thr:.4g} at alpha={cfg.alpha}")
            alphas = np.full(rhos.size, float(cfg.alpha))
        else:
            alphas = np.array([choose_alpha(self.coeffs, abs(r), aux=self.aux)[0]
                               for r in rhos])
            # quantize upwards onto a coarse tick so nearby rho share one mesh
            # (any alpha above the admissible minimum stays admissible)
            grid = self.aux.grid
            tick = max(grid[1] - grid[0], (grid[-1] - grid[0]) / 12.0)
            q = np.ceil((alphas - grid[0]) / tick) * tick + grid[0]
            alphas = grid[np.searchsorted(grid, np.minimum(q, grid[-1]) - 1e-12)]
        refines = np.array([_mesh_refine(abs(r), self._base_h) for r in rhos])
        refines = 2 ** np.ceil(np.log2(refines)).astype(int)
        groups = {}
        for i, (a, rf) in enumerate(zip(alphas, refines)):
            groups.setdefault((float(a), int(rf)), []).append(i)
        return rhos, groups

    def boundary_factors(self, rhos, kind, cfg=None):
        """Phase-stripped factor and derivative at grid nodes >= alpha(rho).

        Returns (alphas, list of (grid_x, val, der) per rho, diagnostics).
        """
        cfg = cfg or JostConfig()
        rhos, groups = self._plan(rhos, cfg)
        out = [None] * rhos.size
        alphas = np.zeros(rhos.size)
        diags = [None] * rhos.size
        for (alpha, refine), idx in groups.items():
            data = self.series_data(alpha, refine)
            gsel = data.mesh.grid_index
            xr = data.mesh.bounds[gsel]
            for lo in range(0, len(idx), _CHUNK):
                sel = idx[lo:lo + _CHUNK]
                val_b, der_b, diag = _series_sweep(data, rhos[sel], kind,
                                                   cfg.series_tol, cfg.max_iters)
                for j, i in enumerate(sel):
                    out[i] = (xr, val_b[j, gsel], der_b[j, gsel])
                    alphas[i] = data.alpha
                    diags[i] = diag
        return alphas, out, diags

    def factors_full_grid(self, rhos, kind, cfg=None):
        """Phase-stripped factor (Z, Z') on the whole grid.

        The series covers [alpha, xmax]; on [0, alpha) the factor equation
        Z'' = -/+ 2 i rho (Z' +/- Q1 Z) - Q0 Z is integrated leftwards, which
        stays well-scaled for arbitrarily large |rho| (the solution itself
        would underflow the phase).
        """
        rhos = np.asarray(rhos, dtype=complex)
        if np.any(rhos.imag < -1e-12):
            raise AdmissibilityError("construction lives in the closed upper half-plane; "
                                     "reflect the pencil for the lower one")
        cfg = cfg or JostConfig()
        alphas, factors, diags = self.boundary_factors(rhos, kind, cfg)
        grid = self.coeffs.grid
        n = grid.size
        m = self.coeffs.m
        s = +1.0 if kind == "jost" else -1.0
        Z = np.zeros((rhos.size, n, m, m), dtype=complex)
        Zp = np.zeros_like(Z)
        by_alpha = {}
        for i, (xr, val, der) in enumerate(factors):
            right = grid >= alphas[i] - 1e-12
            Z[i, right] = val
            Zp[i, right] = der
            if alphas[i] > grid[0]:
                by_alpha.setdefault(round(float(alphas[i]), 12), []).append(i)
        for alpha, idx in by_alpha.items():
            right = grid >= alpha - 1e-12
            xl = grid[~right]
            i0 = np.nonzero(right)[0][0]
            Zl, Zpl = _continue_factor_left(self.coeffs, rhos[idx], s, grid[i0],
                                            Z[idx, i0], Zp[idx, i0], xl, tol=self.tol)
            Z[np.asarray(idx)[:, None], np.nonzero(~right)[0][None, :]] = Zl
            Zp[np.asarray(idx)[:, None], np.nonzero(~right)[0][None, :]] = Zpl
        return Z, Zp, alphas, diags

    def fields(self, rhos, kind, cfg=None):
        """Full-grid (E, E') for rho in the closed upper half-plane.

        Returns (E, Ep, alphas, diags) with E of shape (B, n, m, m).  The
        phase can underflow at large Im(rho) x, in which case the assembled
        trajectory is a true zero to double precision.
        """
        rhos = np.asarray(rhos, dtype=complex)
        Z, Zp, alphas, diags = self.factors_full_grid(rhos, kind, cfg)
        grid = self.coeffs.grid
        s = +1.0 if kind == "jost" else -1.0
        with np.errstate(under="ignore"):
            phase = np.exp(s * 1j * rhos[:, None] * grid[None, :])[..., None, None]
        E = phase * Z
        Ep = phase * (s * 1j * rhos[:, None, None, None] * Z + Zp)
        return E, Ep, alphas, diags


def _continue_factor_left(coeffs, rhos, s, x_start, Z0, Zp0, grid_left, tol=None):
    """Continue the phase-stripped factor from x_start down the grid."""
    tol = tol or Tolerances()
    rhos = np.asarray(rhos, dtype=complex)
    state0 = np.stack([Z0, Zp0], axis=1)
    Q1, Q0 = coeffs.Q1, coeffs.Q0
    two_i_rho = (2j * rhos)[:, None, None]

    def rhs(x, state):
        Z, Zp = state[:, 0], state[:, 1]
        q1 = Q1(x)
        Zpp = -s * two_i_rho * (Zp + s * (q1 @ Z)) - Q0(x) @ Z
        return np.stack([Zp, Zpp], axis=1)

    traj = integrate_ivp(rhs, state0, x_start, grid_left[0], rtol=tol.rtol, atol=tol.atol,
                         t_eval=grid_left[::-1], method=tol.method)
    y = np.moveaxis(traj.y, 0, 1)[:, ::-1]            # (B, nleft, 2, m, m)
    return y[:, :, 0], y[:, :, 1]


def jost_batch(coeffs, rhos, cfg=None, tol=None, workspace=None):
    """Batched decaying solutions e^{i rho x}(...) for Im rho >= 0."""
    ws = workspace or JostWorkspace(coeffs, tol=tol)
    return ws.fields(np.asarray(rhos, dtype=complex), "jost", cfg)


def birkhoff_batch(coeffs, rhos, cfg=None, tol=None, workspace=None):
    """Batched growing companions e^{-i rho x}(...) for Im rho >= 0."""
    ws = workspace or JostWorkspace(coeffs, tol=tol)
    return ws.fields(np.asarray(rhos, dtype=complex), "birkhoff", cfg)


def phase_stripped_factor(coeffs, rho, kind="jost", cfg=None, tol=None, workspace=None):
    """Factor Z with E = e^{+/- i rho x} Z on the series region x >= alpha.

    Returns (x, Z, Zprime, alpha, diagnostics); the factor stays bounded for
    any admissible rho, which makes it the right object for asymptotic tests.
    """
    ws = workspace or JostWorkspace(coeffs, tol=tol)
    alphas, factors, diags = ws.boundary_factors(np.array([rho], dtype=complex), kind,
                                                 cfg or JostConfig())
    xr, val, der = factors[0]
    return xr, val, der, float(alphas[0]), diags[0]


@dataclass
class JostResult:
    field: SolutionField
    alpha: float
    diagnostics: SeriesDiagnostics


def jost_solution(coeffs, rho, cfg=None, tol=None, workspace=None):
    """Solution decaying like e^{i rho x}, rho in the closed upper half-plane.

    Built by successive approximations on [alpha, xmax] and continued as a
    Cauchy problem on [0, alpha).  Raises AdmissibilityError when |rho| is
    below the series threshold of the configured alpha, or on iteration-cap.
    """
    E, Ep, alphas, diags = jost_batch(coeffs, np.array([rho]), cfg, tol=tol,
                                      workspace=workspace)
    return JostResult(SolutionField(complex(rho), coeffs.grid, E[0], Ep[0]),
                      float(alphas[0]), diags[0])


def birkhoff_solution(coeffs, rho, cfg=None, tol=None, workspace=None):
    """Companion solution growing like e^{-i rho x}, Im rho >= 0."""
    E, Ep, alphas, diags = birkhoff_batch(coeffs, np.array([rho]), cfg, tol=tol,
                                          workspace=workspace)
    return JostResult(SolutionField(complex(rho), coeffs.grid, E[0], Ep[0]),
                      float(alphas[0]), diags[0])


def check_independence(Eplus, Eminus):
    """Minimum over the grid of |det [[E+, E-], [E+', E-']]|.

    A positive value certifies that the two constructions form a fundamental
    system at this rho.
    """
    if Eplus.Y.shape != Eminus.Y.shape:
        raise ValueError("fields must share a grid and dimension")
    top = np.concatenate([Eplus.Y, Eminus.Y], axis=2)
    bot = np.concatenate([Eplus.Yprime, Eminus.Yprime], axis=2)
    block = np.concatenate([top, bot], axis=1)
    return float(np.min(np.abs(np.linalg.det(block))))
