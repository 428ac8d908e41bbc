"""Simplified one-dimensional transfer-matrix model of the photonic-crystal mirrors.

Each layer is described by its characteristic (E, H) matrix at normal
incidence, so products over lossless layers are unimodular.  The elliptical
hole lattice is replaced by an effective-index bilayer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

C_LIGHT = 299792458.0
DESIGN_WAVELENGTH = 984.5  # nm


@dataclass(frozen=True)
class BraggStack:
    layers: tuple  # ((index, thickness_nm), ...) for one unit cell
    n_periods: int = 44
    n_taper: int = 20
    n_left: int = 12
    n_right: int = 23
    slab_thickness: float = 200.0  # nm, metadata
    n_embed: float | None = None  # medium surrounding the mirrors

    def __post_init__(self):
        layers = tuple((float(n), float(d)) for n, d in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("unit cell has no layers")
        for n, d in layers:
            if n < 1:
                raise ValueError(f"layer index {n} < 1")
            if not d > 0:
                raise ValueError(f"layer thickness must be > 0, got {d}")
        if self.n_left < 0 or self.n_right < 0:
            raise ValueError("period counts must be >= 0")

    @property
    def period(self):
        return sum(d for _, d in self.layers)

    @property
    def embed_index(self):
        return self.n_embed if self.n_embed is not None else self.layers[0][0]


def quarter_wave_cell(n_high=3.48, n_low=2.0, wavelength=DESIGN_WAVELENGTH, **kwargs):
    """Bilayer with both layers a quarter wave thick at ``wavelength`` (nm)."""
    layers = ((n_high, wavelength / (4 * n_high)), (n_low, wavelength / (4 * n_low)))
    return BraggStack(layers=layers, **kwargs)


def _layers(cell):
    return cell.layers if isinstance(cell, BraggStack) else tuple(cell)


def layer_matrix(n, d, wavelength):
    if not d > 0:
        raise ValueError("zero-thickness layer")
    delta = 2 * math.pi * n * d / wavelength
    c, s = math.cos(delta), math.sin(delta)
    return np.array([[c, -1j * s / n], [-1j * n * s, c]])


def unit_cell_matrix(layers, wavelength):
    """Characteristic matrix of one unit cell at ``wavelength`` (nm)."""
    if not wavelength > 0:
        raise ValueError("wavelength must be positive")
    M = np.eye(2, dtype=complex)
    for n, d in _layers(layers):
        M = M @ layer_matrix(n, d, wavelength)
    return M


def half_trace(cell, wavelength):
    return float(np.real(np.trace(unit_cell_matrix(cell, wavelength)))) / 2.0


def stack_bandgap(cell, wavelength_grid):
    """Intervals (nm) where |Tr M / 2| > 1.

    Edges are located between grid points by root finding on |Tr/2| - 1,
    so the grid only has to sample every gap at least once.
    """
    grid = np.asarray(wavelength_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty wavelength grid")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("wavelength grid must be strictly increasing")
    f = lambda lam: abs(half_trace(cell, lam)) - 1.0
    vals = np.array([f(l) for l in grid])
    inside = vals > 0
    gaps = []
    i = 0
    while i < grid.size:
        if not inside[i]:
            i += 1
            continue
        j = i
        while j + 1 < grid.size and inside[j + 1]:
            j += 1
        lo = brentq(f, grid[i - 1], grid[i]) if i > 0 else grid[i]
        hi = brentq(f, grid[j], grid[j + 1]) if j + 1 < grid.size else grid[j]
        gaps.append((float(lo), float(hi)))
        i = j + 1
    return gaps


def mirror_transmission(cell, N, wavelength=DESIGN_WAVELENGTH, n_in=None, n_out=None):
    """Power transmission through ``N`` periods embedded between ``n_in`` and ``n_out``."""
    if N < 0:
        raise ValueError("N must be >= 0")
    n_embed = cell.embed_index if isinstance(cell, BraggStack) else _layers(cell)[0][0]
    n_in = n_embed if n_in is None else n_in
    n_out = n_embed if n_out is None else n_out
    M = np.linalg.matrix_power(unit_cell_matrix(cell, wavelength), int(N))
    (m11, m12), (m21, m22) = M
    t = 2 * n_in / (n_in * m11 + n_in * n_out * m12 + m21 + n_out * m22)
    return float(min(1.0, (n_out / n_in) * abs(t) ** 2))


def bloch_decay(cell, wavelength):
    """Field attenuation constant kappa (nm^-1) inside a gap, 0 outside."""
    h = abs(half_trace(cell, wavelength))
    if h <= 1:
        return 0.0
    period = sum(d for _, d in _layers(cell))
    return math.acosh(h) / period


def q_estimate(cell, N_left, N_right, wavelength=DESIGN_WAVELENGTH, cavity_length=None):
    """Quality factor of a 1-D cavity between two finite mirrors.

    Q = omega * tau_photon, tau_photon = 2 L_eff n / (c (T_left + T_right)),
    with L_eff = cavity_length + 2 / (2 kappa): each mirror adds the energy
    penetration depth 1/(2 kappa) of its evanescent Bloch field.  The default
    cavity is a half-wave defect in the embedding medium.
    """
    if N_left < 1 or N_right < 1:
        raise ValueError("each mirror needs at least one period")
    kappa = bloch_decay(cell, wavelength)
    if kappa == 0.0:
        raise ValueError(f"unit cell has no band gap at {wavelength} nm")
    n = cell.embed_index if isinstance(cell, BraggStack) else _layers(cell)[0][0]
    if cavity_length is None:
        cavity_length = wavelength / (2 * n)
    L_eff = cavity_length + 2 * (1.0 / (2 * kappa))
    T = mirror_transmission(cell, N_left, wavelength) + mirror_transmission(cell, N_right, wavelength)
    omega = 2 * math.pi * C_LIGHT / (wavelength * 1e-9)
    tau = 2 * L_eff * 1e-9 * n / (C_LIGHT * T)
    return omega * tau


def transmission_scan(cell, N, wavelength_grid):
    """Rows of (wavelength_nm, transmission, in_gap) for the ``bragg`` report."""
    rows = []
    for lam in np.asarray(wavelength_grid, dtype=float):
        rows.append((float(lam), mirror_transmission(cell, N, lam), int(abs(half_trace(cell, lam)) > 1)))
    return rows
