"""Random ion populations near the cavity, PLE spectra and lifetime spreads.

Ions sit uniformly in a disk-shaped footprint below the interface, down to a
depth cutoff.  The lateral mode profile is |E|^2 ~ exp(-2 rho^2) with rho the
radial position in units of the footprint radius.  Zero-spin isotopes only
contribute brightness at the central line; 171Yb ions carry the full level
scheme and sit at their own line offset.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .cavity import CavityMode, IonSite, enhanced_decay, purcell_peak
from .errors import ConfigError
from .levels import REFERENCE_FREQUENCY_GHZ, build_level_system
from .noise import make_rng

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class EnsembleConfig:
    concentration: float = 0.14e-6  # Yb per cation
    cation_density: float = 1.25e28  # m^-3
    footprint_area: float = 1e-12  # m^2
    depth_cutoff: float = 90.0  # nm
    abundance_171: float = 0.143
    abundance_zero_spin: float = 0.696
    inhomogeneous_fwhm: float = 0.3  # GHz
    line_offset_171: float = 1.7  # GHz from the zero-spin line
    linewidth: float = 4.6e-3  # GHz, homogeneous
    readable_fraction_171: float = 1.0 / 3.0  # A-readable ground population without pumping
    collection_window: float = 20e-6  # s per excitation
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.concentration < 1:
            raise ConfigError("ensemble.concentration", f"must lie in [0, 1), got {self.concentration}")
        for name in ("cation_density", "footprint_area", "depth_cutoff", "linewidth", "collection_window"):
            v = getattr(self, name)
            if not v > 0:
                raise ConfigError(f"ensemble.{name}", f"must be > 0, got {v}")
        if self.inhomogeneous_fwhm < 0:
            raise ConfigError("ensemble.inhomogeneous_fwhm", "must be >= 0")
        for name in ("abundance_171", "abundance_zero_spin", "readable_fraction_171"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"ensemble.{name}", f"must lie in [0, 1], got {v}")
        if self.abundance_171 + self.abundance_zero_spin > 1 + 1e-12:
            raise ConfigError("ensemble.abundance_171", "isotope abundances must sum to <= 1")

    @property
    def interaction_volume(self):
        return self.footprint_area * self.depth_cutoff * 1e-9

    @property
    def expected_count(self):
        return self.concentration * self.cation_density * self.interaction_volume


def sample_sites(config, mode=None, rng=None):
    """Draw one random ion population.

    The count is Poisson with mean ``config.expected_count``.  Isotopes other
    than 171Yb and the zero-spin group are labelled "other" and given no line
    offset; they are left out of PLE spectra.
    """
    mode = mode or CavityMode()
    rng = make_rng(config.seed) if rng is None else rng
    lam = config.expected_count
    if lam == 0:
        warnings.warn("expected ion count is zero", RuntimeWarning, stacklevel=2)
        return []
    n = int(rng.poisson(lam))
    if n == 0:
        return []
    depth = rng.uniform(0.0, config.depth_cutoff, n)
    rho2 = rng.uniform(0.0, 1.0, n)  # uniform in disk area
    transverse = np.exp(-2.0 * rho2)
    u = rng.uniform(0.0, 1.0, n)
    spread = rng.normal(0.0, config.inhomogeneous_fwhm / FWHM_PER_SIGMA, n)
    sites = []
    for i in range(n):
        if u[i] < config.abundance_171:
            iso, centre = "171", config.line_offset_171
        elif u[i] < config.abundance_171 + config.abundance_zero_spin:
            iso, centre = "zero-spin", 0.0
        else:
            iso, centre = "other", 0.0
        offset = float(centre + spread[i])
        sites.append(
            IonSite(
                depth=float(depth[i]),
                transverse_factor=float(transverse[i]),
                detuning=REFERENCE_FREQUENCY_GHZ + offset - mode.nu0,
                frequency_offset=offset,
                isotope=iso,
            )
        )
    return sites


def brightness(site, levels, mode, config, efficiency=1.0):
    """Detected photons per excitation on resonance.

    Cavity-channel share of the decay, times the chance of decaying inside
    the collection window, times the readable ground population.
    """
    rates = enhanced_decay(levels, site, mode)
    cavity_share = levels.gamma_bulk * levels.branch_A * rates.F_eff / rates.gamma_total
    caught = -math.expm1(-rates.gamma_total * config.collection_window)
    population = config.readable_fraction_171 if site.isotope == "171" else 1.0
    return efficiency * cavity_share * caught * population


@dataclass
class PLESpectrum:
    offsets: np.ndarray  # GHz
    counts: np.ndarray
    contributions: np.ndarray  # (n_sites, n_offsets)
    sites: list

    def dominant_site(self, i):
        """Index of the site contributing most at grid point ``i`` and its share."""
        col = self.contributions[:, i]
        k = int(np.argmax(col))
        total = col.sum()
        return k, float(col[k] / total) if total > 0 else 0.0


def _bin_edges(grid):
    if grid.size < 2:
        raise ValueError("scan grid needs at least two points")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("scan grid must be increasing")
    mid = 0.5 * (grid[1:] + grid[:-1])
    return np.concatenate([[2 * grid[0] - mid[0]], mid, [2 * grid[-1] - mid[-1]]])


def ple_spectrum(sites, grid, levels=None, mode=None, config=None, shots=1000, efficiency=1.0):
    """Photoluminescence counts versus laser offset (GHz from the zero-spin line).

    Each scan point integrates the laser over its own bin, so a coarse grid
    sums the Lorentzians of every ion within the bin.
    """
    levels = levels or build_level_system()
    mode = mode or CavityMode()
    config = config or EnsembleConfig()
    grid = np.asarray(grid, dtype=float)
    edges = _bin_edges(grid)
    width = np.diff(edges)
    half = 0.5 * config.linewidth
    visible = [s for s in sites if s.isotope != "other"]
    contrib = np.zeros((len(visible), grid.size))
    for k, s in enumerate(visible):
        b = brightness(s, levels, mode, config, efficiency)
        if b == 0:
            continue
        hi = np.arctan((edges[1:] - s.frequency_offset) / half)
        lo = np.arctan((edges[:-1] - s.frequency_offset) / half)
        contrib[k] = shots * b * half * (hi - lo) / width
    return PLESpectrum(grid, contrib.sum(axis=0), contrib, visible)


@dataclass
class LifetimeDistribution:
    taus: np.ndarray
    edges: np.ndarray
    counts: np.ndarray
    tau_floor: float
    tau_bulk: float

    @property
    def stats(self):
        p = np.percentile(self.taus, [10, 50, 90])
        return {
            "n": int(self.taus.size),
            "min": float(self.taus.min()),
            "max": float(self.taus.max()),
            "p10": float(p[0]),
            "median": float(p[1]),
            "p90": float(p[2]),
            "tau_floor": self.tau_floor,
            "tau_bulk": self.tau_bulk,
        }


def lifetime_floor(levels, mode):
    return levels.bulk_lifetime / (1.0 + purcell_peak(mode.Q, mode.V_norm) * levels.branch_A)


def lifetime_distribution(sites, levels=None, mode=None, bins=30):
    """Excited-state lifetimes of every site, histogrammed on a log grid."""
    if not sites:
        raise ValueError("no sites")
    levels = levels or build_level_system()
    mode = mode or CavityMode()
    taus = np.array([enhanced_decay(levels, s, mode).tau for s in sites])
    lo, hi = taus.min(), taus.max()
    if hi <= lo * (1 + 1e-12):
        edges = np.array([lo * (1 - 1e-9), hi * (1 + 1e-9)])
    else:
        edges = np.geomspace(lo, hi * (1 + 1e-12), bins + 1)
    counts = np.histogram(taus, edges)[0]
    return LifetimeDistribution(taus, edges, counts, lifetime_floor(levels, mode), levels.bulk_lifetime)
