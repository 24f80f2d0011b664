"""Stepwise reconstruction with model refresh.

The main equation is uniquely solvable only where the connection matrix is
invertible, which depends on the unknown first-order coefficient.  The
driver therefore reconstructs in windows: solve the main equations with the
current model, commit the recovered coefficients up to just before the
first solvability breakdown, refresh the model so it agrees with the
committed segment and decays beyond it, and repeat.  A pencil whose
connection stays invertible finishes in a single step.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .contour import build_contour
from .errors import NoProgressError, ValidationError, WeylPencilError
from .maineq import prepare_contour_data, solve_main_equations
from .ode import Tolerances
from .pencil import MatrixFunction, PencilCoefficients, matrix_norm
from .reconstruct import (extract_from_solution, omega_log_derivative, omega_product,
                          recover_omega, spline_project)
from .weyl import WeylSamples, certify_pole_free, extract_asymptotic_data

__all__ = [
    "StepperConfig",
    "StepRecord",
    "Reconstruction",
    "extend_model_Q1",
    "detect_breakpoint",
    "reconstruct_window",
    "run_algorithm",
    "run_stepwise",
]


@dataclass
class StepperConfig:
    """Tunables of the stepwise driver (thresholds per the solvability flag)."""

    rcond_min: float = 1e-8        # unsolvable below this
    bnorm_max: float = 0.5         # |Omega*Omega - I| bound certifying solvability
    commit_margin: int = 6         # nodes backed off the first crossing
    overlap: int = 6               # solve this many nodes before the window
    min_step_nodes: int = 10       # abort when a step advances less
    max_steps: int = 64
    model_decay: float = 1.5       # decay rate of the model extension
    ref_sigmas: tuple = (1.3, 1.7, 2.2, 2.8)   # imaginary-axis reference points
    extraction_clip: int = 3
    smooth_knot: int = 4           # spline-projection knots for committed output
    tolerances: Tolerances = field(default_factory=Tolerances)


@dataclass
class StepRecord:
    k: int
    delta: float
    window: tuple
    rcond_min: float
    rcond_max: float
    model_hash: str
    growth_slope: float            # fitted slope of |Omega*Omega - I| in the window


@dataclass
class Reconstruction:
    grid: np.ndarray
    Q1: np.ndarray
    Q0: np.ndarray
    h0: np.ndarray
    h1: np.ndarray
    steps: list
    rcond: np.ndarray
    rcond_star: np.ndarray
    extraction_residual: np.ndarray
    breakpoints: list
    solved_to: float

    @property
    def n_steps(self):
        return len(self.steps)


def _model_hash(model):
    h = hashlib.sha256()
    for arr in (model.Q1.values, model.Q0.values, model.h0, model.h1, model.grid):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def extend_model_Q1(Q1_known, delta, lam, grid, check=True):
    """Extend a coefficient from [0, delta] by exponential decay.

    The extension keeps the known samples on [0, delta] and continues with
    Q1(delta) * exp(-lam (x - delta)).  For lam > 1 the extension satisfies
    the admissible-model conditions (norm never exceeds |Q1(delta)| beyond
    delta, and its integral there stays below |Q1(delta)|); they are checked
    numerically unless ``check`` is disabled.
    """
    if lam <= 1.0:
        raise ValidationError("extension decay rate must exceed 1")
    grid = np.asarray(grid, dtype=float)
    if callable(Q1_known):
        known_vals = Q1_known(np.minimum(grid, delta))
    else:
        known_vals = np.asarray(Q1_known, dtype=complex)
        if known_vals.shape[0] != grid.size:
            raise WeylPencilError("sampled coefficient must cover the grid")
    idx_delta = int(np.argmin(np.abs(grid - delta)))
    anchor = known_vals[idx_delta]
    values = known_vals.copy()
    tail = grid > grid[idx_delta]
    values[tail] = anchor[None] * np.exp(-lam * (grid[tail] - grid[idx_delta]))[:, None, None]
    out = MatrixFunction(grid, values)
    if check:
        norm_anchor = float(matrix_norm(anchor))
        tail_norms = matrix_norm(values[tail]) if np.any(tail) else np.zeros(0)
        sup_ok = not tail_norms.size or tail_norms.max() <= norm_anchor + 1e-12
        integral = float(np.trapezoid(tail_norms, grid[tail])) if tail_norms.size else 0.0
        integral += norm_anchor / lam * np.exp(-lam * (grid[-1] - grid[idx_delta]))
        int_ok = integral <= norm_anchor + 1e-12 or norm_anchor == 0.0
        if not (sup_ok and int_ok):
            raise ValidationError(
                f"extension violates the admissible-model conditions "
                f"(sup ok: {sup_ok}, integral {integral:.3g} vs {norm_anchor:.3g})")
    return out


def detect_breakpoint(solvable, i_prev, n_grid, margin=6, min_step=10):
    """Largest committed index given the per-node solvability flags.

    Returns (i_commit, finished): scans right of ``i_prev``; when every node
    is solvable through the grid end the marker ``finished`` is True and
    i_commit is the last index.  Otherwise i_commit backs off ``margin``
    nodes from the first failure.  Raises NoProgressError when that yields
    fewer than ``min_step`` new nodes.
    """
    i = i_prev + 1
    first_bad = None
    while i < n_grid:
        if not solvable[i]:
            first_bad = i
            break
        i += 1
    if first_bad is None:
        return n_grid - 1, True
    i_commit = max(i_prev, first_bad - 1 - margin)
    if i_commit - i_prev < min_step:
        raise NoProgressError(
            f"solvability lost at x-index {first_bad}, only "
            f"{i_commit - i_prev} usable nodes past the previous breakpoint")
    return i_commit, False


def reconstruct_window(model_data, weyl_diff, i_start, i_stop, cfg, contour,
                       solution=None):
    """Solve, connect, and extract potentials on grid indices [i_start, i_stop].

    Returns (Q1, Q0, diagnostics) sampled on the window, where the solve is
    warmed up ``cfg.overlap`` nodes before i_start so edge stencils stay
    interior.  The connection is anchored to the identity at the window
    start, which is exact when the model agrees with the pencil there.
    """
    grid = model_data.grid
    i0 = max(0, i_start - cfg.overlap)
    if solution is None:
        solution = solve_main_equations(model_data, weyl_diff,
                                        ix_list=range(i0, i_stop + 1),
                                        rcond_min=cfg.rcond_min)
    sol = solution.window(slice(i0, i_stop + 1))
    gwin = sol.grid
    prod, prodp, prod_diag = omega_product(
        sol.z_ref, sol.zstar_ref, sol.w_ref, sol.wstar_ref, gwin,
        derivs=(sol.zp_ref, sol.zstarp_ref, sol.wp_ref, sol.wstarp_ref,
                sol.zstarpp_ref, sol.wstarpp_ref))
    a, lsq_diag = omega_log_derivative(sol.z, sol.zstar, prod, gwin,
                                       product_deriv=prodp,
                                       derivs=(sol.zp, sol.zstarp),
                                       contour=contour)
    anchor = i_start - i0
    omega = recover_omega(a, gwin, start_index=anchor, tol=cfg.tolerances)
    Q1w, Q0w, resid = extract_from_solution(sol, omega, a, gwin,
                                            interior_clip=cfg.extraction_clip)
    if cfg.smooth_knot:
        Q1w = spline_project(Q1w, gwin, knot_every=cfg.smooth_knot)
        Q0w = spline_project(Q0w, gwin, knot_every=cfg.smooth_knot)
    growth = matrix_norm(prod - np.eye(model_data.m))
    rel = gwin - gwin[anchor]
    mask = rel > 0
    slope = float(np.polyfit(rel[mask], growth[mask], 1)[0]) if mask.sum() > 3 else 0.0
    diag = {"solution": sol, "product_diag": prod_diag, "lsq_diag": lsq_diag,
            "growth_slope": slope, "offset": i0, "extraction_residual": resid,
            "omega": omega, "a": a, "product": prod}
    return Q1w, Q0w, diag


def _initial_model(boundary, grid, xmax, cfg):
    m = boundary.h1.shape[0]
    Q1_flat = np.broadcast_to(boundary.Q1_0, (grid.size, m, m)).copy()
    Q1_model = extend_model_Q1(Q1_flat, 0.0, cfg.model_decay, grid)
    zero = MatrixFunction(grid, np.zeros((grid.size, m, m), dtype=complex))
    return PencilCoefficients(m, Q1_model, zero, boundary.h0, boundary.h1, float(xmax))


def _refreshed_model(grid, xmax, boundary, Q1_rec, Q0_rec, delta, cfg):
    m = boundary.h1.shape[0]
    Q1_model = extend_model_Q1(Q1_rec, delta, cfg.model_decay, grid)
    Q0_model = extend_model_Q1(Q0_rec, delta, cfg.model_decay, grid, check=False)
    return PencilCoefficients(m, Q1_model, Q0_model, boundary.h0, boundary.h1, float(xmax))


def run_algorithm(samples, xmax, grid_n, cfg=None, boundary=None, stepwise=True):
    """Reconstruct pencil coefficients from Weyl samples.

    ``samples`` must carry contour metadata (r0, R, node counts) and
    imaginary-axis ladder values for the boundary-data fit.  With
    ``stepwise`` False a single global window is attempted (the procedure
    for an everywhere-solvable pencil); otherwise windows are committed up
    to each solvability breakpoint and the model is refreshed.
    """
    cfg = cfg or StepperConfig()
    grid = np.linspace(0.0, float(xmax), int(grid_n))
    meta = samples.meta
    for key in ("r0", "R", "n_circle", "n_ray"):
        if key not in meta:
            raise WeylPencilError(f"samples lack contour metadata {key!r}")
    contour = build_contour(meta.get("pole_bound", 0.0), r0=meta["r0"], R=meta["R"],
                            n_circle=meta["n_circle"], n_ray=meta["n_ray"])
    node_rho, node_side, node_vals = samples.select(
        lambda r, s: True)
    # match file samples to contour nodes in build order
    data_vals = np.zeros((contour.size, samples.m, samples.m), dtype=complex)
    used = np.zeros(samples.rho.size, dtype=bool)
    for i in range(contour.size):
        hit = None
        for j in range(samples.rho.size):
            if used[j]:
                continue
            if abs(samples.rho[j] - contour.rho[i]) <= 1e-10 * (1 + abs(contour.rho[i])) \
                    and samples.side[j] == contour.side[i]:
                hit = j
                break
        if hit is None:
            raise WeylPencilError(f"missing Weyl sample for contour node {contour.rho[i]:.6g} "
                                  f"({contour.side[i]})")
        data_vals[i] = samples.values[hit]
        used[hit] = True

    if boundary is None:
        boundary = extract_asymptotic_data(samples)
    m = samples.m
    base = max(1.15 * contour.r0, cfg.ref_sigmas[0])
    sig = np.asarray(cfg.ref_sigmas, dtype=float)
    rho_refs = 1j * np.maximum(sig, base * sig / sig[0])

    Q1_rec = np.zeros((grid.size, m, m), dtype=complex)
    Q0_rec = np.zeros((grid.size, m, m), dtype=complex)
    rcond = np.zeros(grid.size)
    rcond_star = np.zeros(grid.size)
    resid = np.zeros(grid.size)
    steps = []
    breakpoints = []
    i_prev = 0
    model = _initial_model(boundary, grid, xmax, cfg)

    for k in range(1, cfg.max_steps + 1):
        zeros = certify_pole_free(model, contour.r0, contour.R, tol=cfg.tolerances)
        if zeros != 0:
            raise NoProgressError(
                f"refreshed model has {zeros} Weyl pole(s) outside the data contour "
                f"radius {contour.r0:.3g}; the sample contour cannot be enlarged")
        model_data = prepare_contour_data(model, contour, rho_refs, tol=cfg.tolerances)
        weyl_diff = data_vals - model_data.weyl
        sol = solve_main_equations(model_data, weyl_diff,
                                   ix_list=range(max(0, i_prev - cfg.overlap), grid.size),
                                   rcond_min=cfg.rcond_min)
        solvable = sol.solvable.copy()
        # the connection product leaving the |B| < 1/2 ball is the sharp
        # solvability loss signal; rcond alone can straddle a determinant zero
        i0 = max(0, i_prev - cfg.overlap)
        swin = sol.window(slice(i0, grid.size))
        prod_full, _, _ = omega_product(
            swin.z_ref, swin.zstar_ref, swin.w_ref, swin.wstar_ref, swin.grid,
            derivs=(swin.zp_ref, swin.zstarp_ref, swin.wp_ref, swin.wstarp_ref,
                    swin.zstarpp_ref, swin.wstarpp_ref))
        growth_ok = matrix_norm(prod_full - np.eye(samples.m)) < cfg.bnorm_max
        solvable[i0:] &= growth_ok
        solvable[: i_prev + 1] = True
        if not stepwise:
            bad = np.nonzero(~solvable)[0]
            if bad.size:
                raise NoProgressError(
                    f"main equation unsolvable at x={grid[bad[0]]:.3g} "
                    "(single-window reconstruction requested)")
            i_commit, finished = grid.size - 1, True
        else:
            i_commit, finished = detect_breakpoint(solvable, i_prev, grid.size,
                                                   margin=cfg.commit_margin,
                                                   min_step=cfg.min_step_nodes)
        Q1w, Q0w, diag = reconstruct_window(model_data, weyl_diff, i_prev, i_commit,
                                            cfg, contour, solution=sol)
        off = i_prev - diag["offset"]
        Q1_rec[i_prev: i_commit + 1] = Q1w[off: off + (i_commit - i_prev + 1)]
        Q0_rec[i_prev: i_commit + 1] = Q0w[off: off + (i_commit - i_prev + 1)]
        resid[i_prev: i_commit + 1] = diag["extraction_residual"][off: off + (i_commit - i_prev + 1)]
        rcond[max(0, i_prev - cfg.overlap):] = sol.rcond[max(0, i_prev - cfg.overlap):]
        rcond_star[max(0, i_prev - cfg.overlap):] = sol.rcond_star[max(0, i_prev - cfg.overlap):]
        delta_k = float(grid[i_commit])
        steps.append(StepRecord(k, delta_k, (float(grid[i_prev]), delta_k),
                                float(sol.rcond[i_prev:i_commit + 1].min(initial=1.0)),
                                float(sol.rcond[i_prev:i_commit + 1].max(initial=0.0)),
                                _model_hash(model), diag["growth_slope"]))
        if finished:
            break
        breakpoints.append(delta_k)
        i_prev = i_commit
        model = _refreshed_model(grid, xmax, boundary, Q1_rec, Q0_rec, delta_k, cfg)
    else:
        raise NoProgressError(f"step limit {cfg.max_steps} reached at x={grid[i_prev]:.3g}")

    return Reconstruction(grid, Q1_rec, Q0_rec, boundary.h0, boundary.h1, steps,
                          rcond, rcond_star, resid, breakpoints, float(grid[i_commit]))


def run_stepwise(samples, xmax, grid_n, cfg=None, boundary=None):
    """Stepwise reconstruction (breakpoint-aware); see run_algorithm."""
    return run_algorithm(samples, xmax, grid_n, cfg=cfg, boundary=boundary, stepwise=True)
