"""Frequency-domain 2D TM field solve for a birdcage coil loaded by a phantom.

The out-of-plane electric field obeys

    lap(E) + k^2 E = -j w mu0 J,    k^2 = w^2 mu0 eps0 eps_r - j w mu0 sigma

discretized with the 5-point stencil and multiplied through by h^2. The RF
shield is a perfect conductor: cells at radius >= shield_radius are pinned to
E = 0 (identity rows, decoupled from the interior).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .phantom import Placement, cell_coordinates

log = logging.getLogger(__name__)

MU0 = 4e-7 * np.pi
EPS0 = 8.8541878128e-12

DEFAULT_TOL = 1e-8
DEFAULT_MAXITER = 20_000
DENSE_ORACLE_LIMIT = 48 * 48


class DegenerateGridError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass
class HelmholtzSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    shape: tuple
    interior: np.ndarray  # bool grid, True where E is unknown
    cell_size: float
    omega: float


@dataclass
class FieldSolution:
    e_field: np.ndarray
    b1_unloaded: np.ndarray
    frequency: float
    placement: Placement
    iterations: int = 0
    residual: float = 0.0


def rung_cells(coil, shape, cell_size):
    """(row, col) of the cell nearest to each rung."""
    h, w = shape
    pos = coil.rung_positions
    cols = np.rint(pos[:, 0] / cell_size + (w - 1) / 2).astype(int)
    rows = np.rint(pos[:, 1] / cell_size + (h - 1) / 2).astype(int)
    return rows, cols


def assemble_system(grid, coil, drive=None):
    """Sparse complex system for the loaded coil on ``grid``'s cells.

    ``drive`` overrides the coil's rung currents (defaults to the quadrature
    drive, unit amplitude per rung).
    """
    shape = grid.shape
    h = grid.cell_size
    x, y = cell_coordinates(shape, h)
    interior = np.hypot(x, y) < coil.shield_radius
    across = interior.any(axis=1).sum()
    if min(across, interior.any(axis=0).sum()) <= 2:
        raise DegenerateGridError("grid has fewer than 3 cells across the shield")
    if interior[[0, -1], :].any() or interior[:, [0, -1]].any():
        raise DegenerateGridError("shield circle extends past the grid edge")

    omega = coil.omega
    k2 = omega**2 * MU0 * EPS0 * grid.permittivity() - 1j * omega * MU0 * grid.conductivity()
    n = interior.size
    idx = np.arange(n).reshape(shape)
    diag = np.where(interior, -4.0 + k2 * h * h, 1.0 + 0j)

    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [diag.ravel()]
    ii, jj = np.nonzero(interior)
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ni, nj = ii + di, jj + dj
        ok = interior[ni, nj]  # shield boundary keeps neighbors in range
        rows.append(idx[ii[ok], jj[ok]])
        cols.append(idx[ni[ok], nj[ok]])
        vals.append(np.ones(ok.sum(), dtype=complex))
    matrix = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
        dtype=complex,
    )

    currents = coil.drive if drive is None else np.asarray(drive, dtype=complex)
    rhs = np.zeros(n, dtype=complex)
    r, c = rung_cells(coil, shape, h)
    # line current I spread over one cell: J h^2 = I
    np.add.at(rhs, idx[r, c], -1j * omega * MU0 * currents)
    rhs[~interior.ravel()] = 0
    return HelmholtzSystem(matrix, rhs, shape, interior, h, omega)


def bicgstab(A, b, x0=None, tol=DEFAULT_TOL, maxiter=DEFAULT_MAXITER, restart=None):
    """Complex BiCGSTAB with restarts.

    Restarts (fresh shadow residual from the current iterate) on breakdown
    and, if ``restart`` is given, every ``restart`` iterations. Convergence
    is judged on the true relative residual ||b - Ax|| / ||b||.

    Returns ``(x, iterations, relative_residual)``.
    """
    b = np.asarray(b, dtype=complex)
    normb = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=complex)
    if normb == 0:
        return np.zeros_like(b), 0, 0.0
    r = b - A @ x
    rel = np.linalg.norm(r) / normb
    it = 0
    tiny = np.finfo(float).tiny
    while rel > tol and it < maxiter:
        rhat = r.copy()
        p = r.copy()
        rho = np.vdot(rhat, r)
        since_restart = 0
        while it < maxiter:
            v = A @ p
            denom = np.vdot(rhat, v)
            if abs(denom) < tiny or abs(rho) < tiny:
                break
            alpha = rho / denom
            s = r - alpha * v
            t = A @ s
            tt = np.vdot(t, t).real
            omega = np.vdot(t, s) / tt if tt > 0 else 0.0
            x += alpha * p + omega * s
            r = s - omega * t
            it += 1
            since_restart += 1
            rel = np.linalg.norm(r) / normb
            if rel <= tol or omega == 0:
                break
            rho_new = np.vdot(rhat, r)
            beta = (rho_new / rho) * (alpha / omega)
            rho = rho_new
            p = r + beta * (p - omega * v)
            if restart and since_restart >= restart:
                break
        # recurrence residual drifts; re-anchor on the true residual
        r = b - A @ x
        rel = np.linalg.norm(r) / normb
    return x, it, rel


def solve_field(system, tol=DEFAULT_TOL, maxiter=DEFAULT_MAXITER, restart=None):
    """Iteratively solve ``system``; returns ``(e_field_grid, iterations, residual)``."""
    x, it, rel = bicgstab(system.matrix, system.rhs, tol=tol, maxiter=maxiter, restart=restart)
    log.debug("bicgstab: %d iterations, relative residual %.3e", it, rel)
    if not rel <= tol:
        raise SolverError("field solve did not converge", rel, it)
    e = x.reshape(system.shape)
    e[~system.interior] = 0
    return e, it, rel


def solve_field_dense(system):
    """Direct dense solve, used as an oracle on small grids."""
    n = system.matrix.shape[0]
    if n > DENSE_ORACLE_LIMIT:
        raise ValueError(f"dense oracle limited to {DENSE_ORACLE_LIMIT} unknowns, got {n}")
    x = np.linalg.solve(system.matrix.toarray(), system.rhs)
    e = x.reshape(system.shape)
    e[~system.interior] = 0
    return e


def line_current_field(x, y, positions, currents):
    """Phasor (Bx, By) of infinite z-directed line currents at ``positions``.

    B = mu0 I / (2 pi d) along phi-hat. Points on a wire get a NaN.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    bx = np.zeros(np.broadcast(x, y).shape, dtype=complex)
    by = np.zeros_like(bx)
    for (xk, yk), current in zip(positions, currents):
        dx, dy = x - xk, y - yk
        d2 = dx * dx + dy * dy
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(d2 > 0, MU0 * current / (2 * np.pi * d2), np.nan)
        bx = bx - dy * scale
        by = by + dx * scale
    return bx, by


def b1_magnitude(coil, x, y):
    """Unnormalized co-rotating B1 magnitude of the empty coil at points (x, y).

    With exp(+j w t) phasors and rung phases +2 pi k / n the drive excites the
    clockwise (proton precession) component, |Bx - j By| / 2. This equals
    |Bx + i By| / 2 written in the exp(-i w t) convention.
    """
    bx, by = line_current_field(x, y, coil.rung_positions, coil.drive)
    return np.abs(bx - 1j * by) / 2


def unloaded_b1(coil, shape, cell_size):
    """Magnetostatic B1 map of the empty coil, normalized to 1 inside the rungs.

    Cells outside the rung circle are 0. A cell center that sits exactly on a
    rung takes the value of its nearest regular neighbor.
    """
    x, y = cell_coordinates(shape, cell_size)
    b1 = b1_magnitude(coil, x, y)
    singular = ~np.isfinite(b1)
    if singular.any():
        b1 = _fill_from_neighbors(b1, singular)
    inside = np.hypot(x, y) < coil.rung_radius
    b1 = np.where(inside, b1, 0.0)
    peak = b1.max()
    if peak > 0:
        b1 = b1 / peak
    return b1


def _fill_from_neighbors(values, bad):
    out = values.copy()
    good_r, good_c = np.nonzero(~bad)
    for r, c in zip(*np.nonzero(bad)):
        k = np.argmin((good_r - r) ** 2 + (good_c - c) ** 2)
        out[r, c] = values[good_r[k], good_c[k]]
    return out


def simulate(grid, coil, placement=Placement(), tol=DEFAULT_TOL, maxiter=DEFAULT_MAXITER):
    """Assemble, solve and pair the loaded E-field with the unloaded B1 map."""
    system = assemble_system(grid, coil)
    e, it, rel = solve_field(system, tol=tol, maxiter=maxiter)
    b1 = unloaded_b1(coil, grid.shape, grid.cell_size)
    return FieldSolution(e, b1, coil.frequency, placement, it, rel)
