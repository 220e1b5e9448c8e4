"""Pointwise and mass-averaged SAR, plus peak/global summaries.

Mass averaging grows a centered square one ring at a time until it holds the
target mass. Sums use ``math.fsum`` so the result is correctly rounded and
independent of summation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class SarMap:
    pointwise: np.ndarray
    averaged_1g: np.ndarray
    mask: np.ndarray
    peak_local: float
    global_avg: float
    partial: np.ndarray | None = None  # cells whose region hit the grid edge short of target mass


@dataclass(frozen=True)
class SarSummary:
    peak_local: float
    global_avg: float
    ratio: float | None


def pointwise_sar(e_field, grid):
    """sigma |E|^2 / (2 rho) on tissue cells, 0 on background."""
    e_field = np.asarray(e_field)
    if e_field.shape != grid.shape:
        raise ValueError(f"field shape {e_field.shape} != grid shape {grid.shape}")
    sigma = grid.conductivity()
    rho = grid.density()
    tissue = rho > 0
    safe_rho = np.where(tissue, rho, 1.0)
    return np.where(tissue, sigma * np.abs(e_field) ** 2 / (2 * safe_rho), 0.0)


def mass_average(pointwise, grid, target_mass=1e-3, return_flags=False):
    """Square-growth mass-averaged SAR.

    For each tissue cell the square of half-width r = 0, 1, 2, ... is grown
    until it contains at least ``target_mass`` kg of tissue. If the square
    cannot grow further without leaving the grid, the partial-mass average is
    kept and the cell is flagged.
    """
    if target_mass <= 0:
        raise ValueError("target_mass must be positive")
    pointwise = np.asarray(pointwise, dtype=np.float64)
    mass = grid.cell_mass()
    weighted = pointwise * mass
    h, w = mass.shape
    out = np.zeros((h, w))
    flags = np.zeros((h, w), dtype=bool)
    for i, j in zip(*np.nonzero(mass > 0)):
        r_max = min(i, j, h - 1 - i, w - 1 - j)
        r = 0
        while True:
            region = (slice(i - r, i + r + 1), slice(j - r, j + r + 1))
            m = math.fsum(mass[region].ravel())
            if m >= target_mass or r == r_max:
                break
            r += 1
        if m < target_mass:
            flags[i, j] = True
        if m > 0:
            out[i, j] = math.fsum(weighted[region].ravel()) / m
    if return_flags:
        return out, flags
    return out


def global_average(pointwise, grid):
    mass = grid.cell_mass()
    total = math.fsum(mass.ravel())
    if total <= 0:
        raise ValueError("grid has no tissue mass")
    return math.fsum((np.asarray(pointwise) * mass).ravel()) / total


def compute_sar(e_field, grid, target_mass=1e-3):
    pw = pointwise_sar(e_field, grid)
    avg, flags = mass_average(pw, grid, target_mass, return_flags=True)
    mask = grid.classes != 0
    if not mask.any():
        raise ValueError("grid has no tissue cells")
    return SarMap(pw, avg, mask, float(avg[mask].max()), global_average(pw, grid), flags)


def summarize(sar):
    """Peak local, global average and their ratio (``None`` when global SAR is 0)."""
    if not np.any(sar.mask):
        raise ValueError("empty tissue mask")
    ratio = sar.peak_local / sar.global_avg if sar.global_avg > 0 else None
    return SarSummary(sar.peak_local, sar.global_avg, ratio)
