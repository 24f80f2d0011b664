"""Weyl solutions, the Weyl matrix, contour/ladder sampling, and the
large-rho extraction of boundary data.

The Weyl solution is normalized by U_rho(Phi) = I and decays like
e^{+/- i rho x} in the matching half-plane; its value at x = 0 is the Weyl
matrix, the spectral data of the inverse problem.  Row-module ("star")
quantities are computed by solving the transposed pencil and transposing,
and lower half-plane values by the reflection rho -> -rho of the pencil.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .contour import SIDE_ABOVE, SIDE_BELOW, SIDE_CIRCLE
from .errors import SingularSystemError, WeylPencilError
from .jost import JostWorkspace
from .ode import SolutionField, Tolerances
from .pencil import PencilCoefficients, matrix_norm

__all__ = [
    "WeylEngine",
    "WeylSamples",
    "BoundaryData",
    "weyl_solution",
    "weyl_matrix",
    "star_weyl_matrix",
    "weyl_contour_samples",
    "sample_weyl_ladder",
    "extract_asymptotic_data",
    "jost_boundary_determinants",
]

_RCOND_FLOOR = 1e-12


class WeylEngine:
    """Forward-problem engine caching workspaces for one pencil.

    Four series workspaces cover the combinations (standard | transposed)
    x (as-is | reflected); every Weyl quantity is assembled from these.
    """

    def __init__(self, coeffs, tol=None):
        self.coeffs = coeffs
        self.tol = tol or Tolerances()
        self._ws = {}

    def workspace(self, star=False, refl=False):
        key = (star, refl)
        if key not in self._ws:
            c = self.coeffs
            if star:
                c = c.transpose()
            if refl:
                c = c.reflect()
            self._ws[key] = JostWorkspace(c, tol=self.tol)
        return self._ws[key]

    def decaying_fields(self, rhos, upper=True, star=False, cfg=None):
        """Trajectories (E, E') of the half-plane-decaying solution.

        For the lower half-plane the reflected pencil is solved at -rho;
        star solutions transpose the transposed-pencil output.
        """
        rhos = np.asarray(rhos, dtype=complex)
        ws = self.workspace(star=star, refl=not upper)
        E, Ep, alphas, diags = ws.fields(rhos if upper else -rhos, "jost", cfg)
        if star:
            E = E.transpose(0, 1, 3, 2)
            Ep = Ep.transpose(0, 1, 3, 2)
        return E, Ep, alphas, diags

    def _boundary_operator(self, rhos, E0, Ep0, star=False):
        bf = 1j * rhos[:, None, None] * self.coeffs.h1 + self.coeffs.h0
        if star:
            return Ep0 + E0 @ bf
        return Ep0 + bf @ E0

    def weyl_values(self, rhos, upper, star=False, cfg=None):
        """Weyl matrix at each rho using the given half-plane construction."""
        rhos = np.asarray(rhos, dtype=complex)
        E, Ep, _, _ = self.decaying_fields(rhos, upper=upper, star=star, cfg=cfg)
        E0, Ep0 = E[:, 0], Ep[:, 0]
        U = self._boundary_operator(rhos, E0, Ep0, star=star)
        self._check_regular(U, rhos)
        if star:
            return np.linalg.solve(U, E0)
        return np.linalg.solve(U.transpose(0, 2, 1), E0.transpose(0, 2, 1)).transpose(0, 2, 1)

    @staticmethod
    def _check_regular(U, rhos):
        m = U.shape[-1]
        scale = matrix_norm(U)
        det = np.abs(np.linalg.det(U))
        bad = det < (_RCOND_FLOOR * np.maximum(scale, 1e-300)) ** m
        if np.any(bad):
            raise SingularSystemError(
                f"boundary operator is numerically singular near rho={rhos[bad][0]:.6g}; "
                "the spectral parameter sits in the pole region of the Weyl matrix")

    def weyl_solution_field(self, rho, side=None, star=False, cfg=None):
        """Full Weyl solution trajectory at one rho (side resolves real rho)."""
        rho_c = complex(rho)
        upper = _is_upper(rho_c, side)
        E, Ep, _, _ = self.decaying_fields(np.array([rho_c]), upper=upper, star=star, cfg=cfg)
        U = self._boundary_operator(np.array([rho_c]), E[:, 0], Ep[:, 0], star=star)
        self._check_regular(U, np.array([rho_c]))
        Ui = np.linalg.inv(U[0])
        if star:
            Y = Ui @ E[0]
            Yp = Ui @ Ep[0]
        else:
            Y = E[0] @ Ui
            Yp = Ep[0] @ Ui
        return SolutionField(rho_c, self.coeffs.grid, Y, Yp)


def _is_upper(rho, side):
    if side == SIDE_ABOVE:
        return True
    if side == SIDE_BELOW:
        return False
    if side is None or side == SIDE_CIRCLE:
        if abs(rho.imag) <= 1e-14:
            raise WeylPencilError("real rho needs an explicit side ('above'/'below')")
        return rho.imag > 0
    raise WeylPencilError(f"unknown side tag {side!r}")


def weyl_solution(coeffs, rho, side=None, engine=None, cfg=None):
    """Weyl solution Phi, normalized by the boundary form, decaying at infinity."""
    engine = engine or WeylEngine(coeffs)
    return engine.weyl_solution_field(rho, side=side)


def weyl_matrix(coeffs, rho, side=None, engine=None):
    """Weyl matrix M(rho) = Phi(0, rho)."""
    engine = engine or WeylEngine(coeffs)
    upper = _is_upper(complex(rho), side)
    return engine.weyl_values(np.array([rho], dtype=complex), upper)[0]


def star_weyl_matrix(coeffs, rho, side=None, engine=None):
    """Weyl matrix of the row-module problem; coincides with M(rho)."""
    engine = engine or WeylEngine(coeffs)
    upper = _is_upper(complex(rho), side)
    return engine.weyl_values(np.array([rho], dtype=complex), upper, star=True)[0]


@dataclass
class WeylSamples:
    """Weyl-matrix values at tagged spectral nodes.

    ``side`` tells which one-sided construction produced each value; the
    optional ``meta`` dictionary carries the contour header of a data file
    (m, r0, R, n_circle, n_ray, ladder).
    """

    m: int
    rho: np.ndarray
    side: tuple
    values: np.ndarray
    provenance: str = "forward-computed"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != (self.rho.size, self.m, self.m):
            raise WeylPencilError("sample value shape mismatch")
        if not np.all(np.isfinite(self.values)):
            raise WeylPencilError("non-finite Weyl samples")

    def select(self, predicate):
        idx = [i for i in range(self.rho.size) if predicate(self.rho[i], self.side[i])]
        return (self.rho[idx], [self.side[i] for i in idx], self.values[idx])


def weyl_contour_samples(coeffs, contour, engine=None, star=False):
    """Weyl matrix at every contour node, via the side-matching construction."""
    engine = engine or WeylEngine(coeffs)
    rho = contour.rho
    upper_idx = [i for i in range(contour.size)
                 if _is_upper(complex(rho[i]), contour.side[i])]
    lower_idx = [i for i in range(contour.size) if i not in set(upper_idx)]
    values = np.zeros((contour.size, coeffs.m, coeffs.m), dtype=complex)
    if upper_idx:
        values[upper_idx] = engine.weyl_values(rho[upper_idx], True, star=star)
    if lower_idx:
        values[lower_idx] = engine.weyl_values(rho[lower_idx], False, star=star)
    meta = {"r0": contour.r0, "R": contour.R, "n_circle": contour.n_circle,
            "n_ray": contour.n_ray, "pole_bound": contour.pole_bound}
    return WeylSamples(coeffs.m, rho.copy(), contour.side, values, meta=meta)


def forward_samples(coeffs, contour, sigmas, engine=None):
    """Contour samples plus the imaginary-axis ladder, as one sample set.

    This is the full payload of a forward run: everything the inverse
    problem needs (main-equation data on the contour, boundary-data ladder).
    """
    engine = engine or WeylEngine(coeffs)
    on_contour = weyl_contour_samples(coeffs, contour, engine=engine)
    ladder = sample_weyl_ladder(coeffs, sigmas, engine=engine)
    rho = np.concatenate([on_contour.rho, ladder.rho])
    side = tuple(list(on_contour.side) + list(ladder.side))
    values = np.concatenate([on_contour.values, ladder.values])
    meta = dict(on_contour.meta)
    meta["ladder"] = list(np.asarray(sigmas, dtype=float))
    return WeylSamples(coeffs.m, rho, side, values, meta=meta)


def sample_weyl_ladder(coeffs, sigmas, engine=None):
    """Weyl matrix on the imaginary-axis ladder +/- i sigma (both half-planes)."""
    engine = engine or WeylEngine(coeffs)
    sigmas = np.asarray(sigmas, dtype=float)
    rho_up = 1j * sigmas
    rho_dn = -1j * sigmas
    vals_up = engine.weyl_values(rho_up, True)
    vals_dn = engine.weyl_values(rho_dn, False)
    rho = np.concatenate([rho_up, rho_dn])
    side = tuple([SIDE_ABOVE] * sigmas.size + [SIDE_BELOW] * sigmas.size)
    values = np.concatenate([vals_up, vals_dn])
    return WeylSamples(coeffs.m, rho, side, values, meta={"ladder": sigmas.tolist()})


@dataclass
class BoundaryData:
    """Boundary matrices and Q1(0) recovered from large-rho asymptotics."""

    h1: np.ndarray
    h0: np.ndarray
    Q1_0: np.ndarray
    fit_residual: float
    half_plane_mismatch: float


def _fit_half_plane(rhos, values, nterms=6):
    """Least-squares fit of i*rho*M against powers of 1/(i rho).

    Smooth coefficients give the remainder a full inverse-power expansion,
    so several nuisance orders beyond A2 are fitted (and discarded) to
    de-bias the two leading terms.  Rows are weighted by |rho| and columns
    normalized for conditioning.
    """
    rhos = np.asarray(rhos, dtype=complex)
    nterms = min(nterms, rhos.size - 1)
    z = 1.0 / (1j * rhos)
    X = np.stack([z ** k for k in range(nterms)], axis=1)
    y = (1j * rhos)[:, None] * values.reshape(len(rhos), -1)
    w = np.abs(rhos)
    scale = np.abs(X).max(axis=0)
    coef, *_ = np.linalg.lstsq((X / scale) * w[:, None], y * w[:, None], rcond=None)
    coef = coef / scale[:, None]
    m = values.shape[-1]
    A1 = coef[0].reshape(m, m)
    A2 = coef[1].reshape(m, m)
    resid = float(np.max(np.abs(X @ coef - y)))
    return A1, A2, resid


def extract_asymptotic_data(source, sigmas=None, engine=None, mismatch_tol=5e-2):
    """Recover (h1, h0, Q1(0)) from Weyl samples at large imaginary rho.

    ``source`` is either a pencil (sampled on a ladder, default sigma from
    20 to 200) or a WeylSamples object containing imaginary-axis nodes in
    both half-planes.  The two-term expansions of the upper and lower
    half-planes determine h1 twice (agreement is reported and enforced at
    ``mismatch_tol``) and jointly separate Q1(0) from h0.
    """
    if isinstance(source, PencilCoefficients):
        if sigmas is None:
            sigmas = np.geomspace(20.0, 200.0, 12)
        samples = sample_weyl_ladder(source, sigmas, engine=engine)
    else:
        samples = source
    rho_up, _, vals_up = samples.select(
        lambda r, s: abs(r.real) <= 1e-12 * abs(r) and r.imag > 0)
    rho_dn, _, vals_dn = samples.select(
        lambda r, s: abs(r.real) <= 1e-12 * abs(r) and r.imag < 0)
    if len(rho_up) < 3 or len(rho_dn) < 3:
        raise WeylPencilError("need at least 3 imaginary-axis samples per half-plane")

    eye = np.eye(samples.m)
    A1u, A2u, res_u = _fit_half_plane(rho_up, vals_up)
    A1d, A2d, res_d = _fit_half_plane(rho_dn, vals_dn)
    h1_up = np.linalg.inv(A1u) - eye
    h1_dn = np.linalg.inv(A1d) + eye
    mismatch = float(matrix_norm(h1_up - h1_dn))
    if mismatch > mismatch_tol:
        raise WeylPencilError(
            f"half-plane h1 estimates disagree by {mismatch:.3e} (> {mismatch_tol:.1e})")
    h1 = 0.5 * (h1_up + h1_dn)
    # second-order coefficients: upper gives Q1(0) - h0, lower gives -(Q1(0) + h0)
    Cu = np.linalg.inv(A1u) @ A2u @ np.linalg.inv(A1u)
    Cd = np.linalg.inv(A1d) @ A2d @ np.linalg.inv(A1d)
    Q1_0 = 0.5 * (Cu - Cd)
    h0 = -0.5 * (Cu + Cd)
    return BoundaryData(h1, h0, Q1_0, max(res_u, res_d), mismatch)


def jost_boundary_determinants(coeffs, rhos, engine=None, tol=None, force_upper=None):
    """det of the boundary operator applied to the decaying solution.

    Used by the pole-bound scan: zeros of this determinant in the matching
    half-plane are the poles of the Weyl matrix.  ``force_upper`` pins the
    one-sided construction for real spectral points.
    """
    engine = engine or WeylEngine(coeffs, tol=tol)
    rhos = np.asarray(rhos, dtype=complex)
    if force_upper is None:
        upper = rhos.imag >= 0
    else:
        upper = np.full(rhos.size, bool(force_upper))
    out = np.zeros(rhos.size, dtype=complex)
    for mask, up in ((upper, True), (~upper, False)):
        if np.any(mask):
            E, Ep, _, _ = engine.decaying_fields(rhos[mask], upper=up)
            U = engine._boundary_operator(rhos[mask], E[:, 0], Ep[:, 0])
            out[mask] = np.linalg.det(U)
    return out


def certify_pole_free(coeffs, r_in, r_out, n=160, engine=None, tol=None):
    """Argument-principle certificate that no Weyl-matrix pole lies in the
    annulus r_in < |rho| < r_out (both half-planes).

    Returns the total winding number (zero when clean).  Raises
    SingularSystemError when the determinant nearly vanishes on the scanned
    path, which signals a pole on or next to the real axis.
    """
    engine = engine or WeylEngine(coeffs, tol=tol)
    total = 0
    for upper in (True, False):
        sgn = 1.0 if upper else -1.0
        pieces = [
            np.linspace(r_in, r_out, n),
            r_out * np.exp(1j * sgn * np.linspace(0.0, np.pi, 2 * n)),
            np.linspace(-r_out, -r_in, n),
            r_in * np.exp(1j * sgn * np.linspace(np.pi, 0.0, 2 * n)),
        ]
        path = np.concatenate(pieces)
        dets = jost_boundary_determinants(coeffs, path, engine=engine,
                                          force_upper=upper)
        scale = np.abs(path) ** coeffs.m
        small = np.abs(dets) < 1e-6 * scale
        if np.any(small):
            raise SingularSystemError(
                f"Weyl determinant nearly vanishes at rho={path[small][0]:.4g}; "
                "a pole sits on or next to the scanned path")
        winding = np.unwrap(np.angle(dets))
        total += int(round((winding[-1] - winding[0]) / (2.0 * np.pi)))
    return total
