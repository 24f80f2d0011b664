"""Spectral-plane contour: a circle around the singularities of the Weyl
matrix plus two-sided cuts along the real axis, with quadrature.

The circle is traversed counterclockwise.  Ray integrals realize a two-sided
cut truncated symmetrically at radius R: upper edges are traversed toward
the circle, lower edges away from it, so a jump-free integrand cancels on
the rays and only the jump of the Weyl-matrix difference contributes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContourError

__all__ = ["Contour", "build_contour", "contour_integral", "estimate_pole_bound"]

SIDE_CIRCLE = "circle"
SIDE_ABOVE = "above"
SIDE_BELOW = "below"


@dataclass(frozen=True)
class Contour:
    r0: float
    R: float
    n_circle: int
    n_ray: int
    rho: np.ndarray          # (K,) complex nodes
    weight: np.ndarray       # (K,) complex quadrature weights for d(theta)
    side: tuple              # (K,) side tags
    pole_bound: float = 0.0
    mirror: dict = field(default_factory=dict)   # index of the opposite-side twin

    def __post_init__(self):
        self.rho.setflags(write=False)
        self.weight.setflags(write=False)

    @property
    def size(self):
        return self.rho.size

    def in_exterior_domain(self, z, margin=1e-9):
        """True if z lies off the contour and outside the circle (the region
        where the reconstructed solutions are evaluated)."""
        z = complex(z)
        if abs(z) <= self.r0 * (1.0 + margin) + margin:
            return False
        near_axis = abs(z.imag) <= margin * (1.0 + abs(z.real))
        return not near_axis

    def piece_lengths(self):
        """Arc length carried by the circle and by each ray edge."""
        out = {}
        for tag in (SIDE_CIRCLE, SIDE_ABOVE, SIDE_BELOW):
            sel = [i for i, s in enumerate(self.side) if s == tag]
            out[tag] = float(np.sum(np.abs(self.weight[sel])))
        return out


def _gauss_legendre_panels(a, b, n_nodes, panel_size=8):
    """Composite Gauss-Legendre nodes/weights on [a, b], panels geometric."""
    panels = max(1, int(round(n_nodes / panel_size)))
    q = int(np.ceil(n_nodes / panels))
    edges = a * (b / a) ** (np.arange(panels + 1) / panels)
    xs, ws = np.polynomial.legendre.leggauss(q)
    nodes, weights = [], []
    for k in range(panels):
        lo, hi = edges[k], edges[k + 1]
        half = 0.5 * (hi - lo)
        nodes.append(0.5 * (hi + lo) + half * xs)
        weights.append(half * ws)
    return np.concatenate(nodes), np.concatenate(weights)


def build_contour(pole_bound, r0=None, R=None, n_circle=40, n_ray=40):
    """Discretize the contour.

    Parameters
    ----------
    pole_bound : radius certified to contain all Weyl-matrix singularities
    r0 : circle radius (default 1.5 * pole_bound); must exceed pole_bound
    R : symmetric truncation radius of the rays (must exceed r0);
        R == r0 yields a circle-only contour
    n_circle : trapezoidal node count on the circle (even, >= 8); the two
        real-axis crossings are split into above/below half-weight nodes
    n_ray : Gauss-Legendre node count per ray edge (0 with R == r0 allowed)

    Circle weights are complex increments i*r0*e^{i t}*dt; ray weights are
    signed so that upper edges run toward the circle and lower edges away.
    """
    pole_bound = float(pole_bound)
    if r0 is None:
        r0 = 1.5 * max(pole_bound, 1e-6)
    r0 = float(r0)
    if r0 <= pole_bound:
        raise ContourError(f"circle radius r0={r0} does not enclose pole bound {pole_bound}")
    if R is None:
        R = max(12.0 * r0, r0 + 20.0)
    R = float(R)
    if R < r0:
        raise ContourError(f"ray truncation R={R} must be >= r0={r0}")
    n_circle = int(n_circle)
    if n_circle < 8 or n_circle % 2:
        raise ContourError("n_circle must be even and at least 8")

    rho, weight, side = [], [], []
    dt = 2.0 * np.pi / n_circle
    for j in range(n_circle):
        t = dt * j
        node = r0 * np.exp(1j * t)
        w = 1j * r0 * np.exp(1j * t) * dt
        if j == 0:
            rho += [r0, r0]
            weight += [0.5 * w, 0.5 * w]
            side += [SIDE_ABOVE, SIDE_BELOW]
        elif j == n_circle // 2:
            rho += [-r0, -r0]
            weight += [0.5 * w, 0.5 * w]
            side += [SIDE_ABOVE, SIDE_BELOW]
        else:
            rho.append(node)
            weight.append(w)
            side.append(SIDE_CIRCLE)

    if R > r0 and n_ray > 0:
        t_nodes, t_w = _gauss_legendre_panels(r0, R, n_ray)
        # upper edges run toward the circle, lower edges away from it, on
        # both rays: the d(theta) increments are -dt above and +dt below
        for ray_sign in (1.0, -1.0):
            pts = ray_sign * t_nodes
            for tag, orient in ((SIDE_ABOVE, -1.0), (SIDE_BELOW, 1.0)):
                rho.extend(pts)
                weight.extend(orient * t_w)
                side.extend([tag] * len(pts))
    elif n_ray > 0 and R == r0:
        n_ray = 0

    rho = np.asarray(rho, dtype=complex)
    weight = np.asarray(weight, dtype=complex)
    side = tuple(side)

    mirror = {}
    for i, (z, s) in enumerate(zip(rho, side)):
        if s == SIDE_ABOVE:
            for j, (z2, s2) in enumerate(zip(rho, side)):
                if s2 == SIDE_BELOW and z2 == z:
                    mirror[i] = j
                    mirror[j] = i
                    break
    return Contour(r0, R, n_circle, n_ray, rho, weight, side, pole_bound, mirror)


def contour_integral(contour, samples):
    """Weighted sum realizing the contour integral of node samples.

    ``samples`` has shape (K, ...); missing (NaN) samples raise.
    """
    samples = np.asarray(samples)
    if samples.shape[0] != contour.size:
        raise ContourError(f"expected {contour.size} samples, got {samples.shape[0]}")
    if not np.all(np.isfinite(samples)):
        raise ContourError("contour samples contain non-finite values")
    w = contour.weight.reshape((-1,) + (1,) * (samples.ndim - 1))
    return np.sum(w * samples, axis=0)


def half_plane_sign(contour, index):
    """+1 where the node takes its value from the closed upper half-plane."""
    s = contour.side[index]
    if s == SIDE_ABOVE:
        return 1
    if s == SIDE_BELOW:
        return -1
    return 1 if contour.rho[index].imag > 0 else -1


def estimate_pole_bound(coeffs, n_angles=16, growth=1.18, cap_factor=40.0, tol=None):
    """Radius outside which det U(E+/-) is certified bounded away from zero.

    Samples the boundary-form determinant of the decaying fundamental
    solution on expanding circles until the leading-term ratio test

        |det U(E)| >= 0.5 * |rho|^m * |det(I +/- h1)|

    passes at every sampled angle of the matching half-plane.  Raises
    ContourError when no radius below the cap passes.
    """
    from .errors import AdmissibilityError as _AdmErr
    from .weyl import jost_boundary_determinants

    m = coeffs.m
    eye = np.eye(m)
    guess = 0.0
    for sign in (1.0, -1.0):
        mat = eye + sign * coeffs.h1
        lam = np.linalg.eigvals(np.linalg.solve(mat, coeffs.h0))
        guess = max(guess, float(np.max(np.abs(lam))) if lam.size else 0.0)
    x = coeffs.grid
    from .pencil import matrix_norm
    potential_mass = float(np.trapezoid(matrix_norm(coeffs.Q1(x)) + matrix_norm(coeffs.Q0(x)), x))
    r = max(0.35, 1.05 * guess, 0.5 * potential_mass)
    cap = cap_factor * r + 10.0

    det_plus = abs(np.linalg.det(eye + coeffs.h1))
    det_minus = abs(np.linalg.det(eye - coeffs.h1))
    while r <= cap:
        ok = True
        for upper in (True, False):
            angles = (np.arange(n_angles) + 0.5) * np.pi / n_angles
            rhos = r * np.exp(1j * angles) if upper else r * np.exp(-1j * angles)
            try:
                dets = jost_boundary_determinants(coeffs, rhos, tol=tol)
            except _AdmErr:
                ok = False       # radius below the series threshold: grow
                break
            ref = det_plus if upper else det_minus
            if np.min(np.abs(dets)) < 0.5 * (r ** m) * ref:
                ok = False
                break
        if ok:
            return float(r)
        r *= growth
    raise ContourError(f"no pole bound found below cap {cap:.3g}")
