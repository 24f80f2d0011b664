"""Per-cell Gauss-Legendre meshes with spectral partial-integration matrices.

The successive-approximation integrals need antiderivatives evaluated at
interior quadrature points of every cell.  Values at the q Gauss nodes of a
cell determine a degree-(q-1) Legendre interpolant whose antiderivative is
exact in coefficient space; the matrices below map node values directly to
partial integrals over [-1, x_i] and [x_i, 1] of the reference cell.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial import legendre as npleg

_CACHE = {}


def cell_rule(q):
    """Nodes, weights, and partial-integration matrices for q Gauss points.

    Returns (x, w, S_left, S_right) on [-1, 1]:
      (S_left @ f)[i]  ~ integral of f from -1 to x_i,
      (S_right @ f)[i] ~ integral of f from x_i to +1,
    exact for polynomials of degree < q.
    """
    q = int(q)
    if q in _CACHE:
        return _CACHE[q]
    x, w = npleg.leggauss(q)
    V = npleg.legvander(x, q - 1)                   # V[i, k] = P_k(x_i)
    Vext = npleg.legvander(x, q)                    # includes P_q
    F = np.empty((q, q))
    F[:, 0] = x + 1.0
    for k in range(1, q):
        F[:, k] = (Vext[:, k + 1] - Vext[:, k - 1]) / (2 * k + 1)
    S_left = F @ np.linalg.inv(V)
    S_right = w[None, :] - S_left
    for arr in (x, w, S_left, S_right):
        arr.setflags(write=False)
    _CACHE[q] = (x, w, S_left, S_right)
    return _CACHE[q]


class CellMesh:
    """Cell-major Gauss mesh refining a uniform base grid on [a, b]."""

    def __init__(self, base_grid, refine=1, q=14):
        base_grid = np.asarray(base_grid, dtype=float)
        refine = int(max(1, refine))
        bounds = base_grid
        if refine > 1:
            pieces = [np.linspace(base_grid[i], base_grid[i + 1], refine + 1)[:-1]
                      for i in range(base_grid.size - 1)]
            bounds = np.concatenate(pieces + [base_grid[-1:]])
        self.bounds = bounds                        # (Nc+1,)
        self.refine = refine
        self.q = int(q)
        x, w, SL, SR = cell_rule(self.q)
        self.ref_x, self.ref_w, self.S_left, self.S_right = x, w, SL, SR
        self.half = 0.5 * np.diff(bounds)           # (Nc,)
        mid = 0.5 * (bounds[1:] + bounds[:-1])
        self.pts = mid[:, None] + self.half[:, None] * x[None, :]   # (Nc, q)
        self.n_cells = self.half.size
        # base-grid node -> boundary index
        self.grid_index = np.arange(0, self.n_cells + 1, refine)

    def integrate_cells(self, fvals):
        """Full-cell integrals; fvals has shape (..., Nc, q, m, m)."""
        return np.einsum("q,...cqij,c->...cij", self.ref_w, fvals, self.half)

    def partial_right(self, fvals):
        """Integrals from each interior point to its cell's right edge."""
        return np.einsum("iq,...cqab,c->...ciab", self.S_right, fvals, self.half)

    def partial_left(self, fvals):
        """Integrals from each cell's left edge to each interior point."""
        return np.einsum("iq,...cqab,c->...ciab", self.S_left, fvals, self.half)
