"""Cavity mode, ion placement and Purcell-enhanced decay rates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit

from .errors import ConfigError, FitError
from .levels import REFERENCE_FREQUENCY_GHZ


@dataclass(frozen=True)
class CavityMode:
    nu0: float = REFERENCE_FREQUENCY_GHZ  # GHz
    Q: float = 5300.0
    V_norm: float = 1.7  # (lambda/n)^3, referenced to the strongest field in YVO4
    n_host: float = 2.17
    field_halving_depth: float = 30.0  # nm
    interface_fraction: float = 0.4  # kept for reference only

    def __post_init__(self):
        for name in ("nu0", "Q", "V_norm", "n_host", "field_halving_depth"):
            v = getattr(self, name)
            if not v > 0:
                raise ConfigError(f"cavity.{name}", f"must be > 0, got {v}")
        if not 0 <= self.interface_fraction <= 1:
            raise ConfigError("cavity.interface_fraction", "must lie in [0, 1]")

    @property
    def linewidth(self):
        """Full width at half maximum in GHz."""
        return self.nu0 / self.Q


@dataclass(frozen=True)
class IonSite:
    depth: float = 0.0  # nm below the GaAs/YVO4 interface
    transverse_factor: float = 1.0
    dipole_alignment: float = 1.0
    detuning: float = 0.0  # ion - cavity, GHz
    frequency_offset: float = 0.0  # from 304505 GHz, GHz
    isotope: str = "171"

    def __post_init__(self):
        if not self.depth >= 0:
            raise ConfigError("site.depth", f"must be >= 0, got {self.depth}")
        for name in ("transverse_factor", "dipole_alignment"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"site.{name}", f"must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class DecayRates:
    """Excited-state decay split into channels (all rates in s^-1)."""

    gamma_total: float
    F_eff: float
    channels: dict = field(default_factory=dict)

    @property
    def tau(self):
        return 1.0 / self.gamma_total

    @property
    def gamma_A(self):
        return self.channels.get("A", 0.0)

    def fraction(self, channel):
        return self.channels.get(channel, 0.0) / self.gamma_total


def purcell_peak(Q, V_norm):
    if not (Q > 0 and V_norm > 0):
        raise ValueError("Q and V_norm must be positive")
    return 3.0 / (4.0 * math.pi**2) * Q / V_norm


def field_overlap(site, mode):
    """|E|^2 at the ion relative to the YVO4 maximum, times lateral and dipole factors."""
    return 2.0 ** (-site.depth / mode.field_halving_depth) * site.transverse_factor * site.dipole_alignment


def detuning_factor(delta, mode):
    x = 2.0 * mode.Q * np.asarray(delta, dtype=float) / mode.nu0
    out = 1.0 / (1.0 + x * x)
    return float(out) if np.ndim(out) == 0 else out


def effective_purcell(site, mode):
    return purcell_peak(mode.Q, mode.V_norm) * field_overlap(site, mode) * detuning_factor(site.detuning, mode)


def enhanced_decay(levels, site, mode):
    """Purcell-enhanced rates: only the A channel couples to the cavity."""
    F = effective_purcell(site, mode)
    g0 = levels.gamma_bulk
    channels = {
        "A": g0 * levels.branch_A * (1.0 + F),
        "C": g0 * levels.branch_C,
        "aux": g0 * levels.branch_aux,
    }
    total = g0 * (1.0 + F * levels.branch_A)
    return DecayRates(gamma_total=total, F_eff=F, channels=channels)


def depth_for_purcell(F_target, mode, transverse_factor=1.0, dipole_alignment=1.0, detuning=0.0):
    """Depth (nm) at which a site reaches effective Purcell factor ``F_target``."""
    F_surface = (
        purcell_peak(mode.Q, mode.V_norm) * transverse_factor * dipole_alignment * detuning_factor(detuning, mode)
    )
    if F_target <= 0:
        return math.inf
    if F_target > F_surface:
        raise ValueError(f"F_eff={F_target:.4g} exceeds the interface value {F_surface:.4g}")
    return mode.field_halving_depth * math.log2(F_surface / F_target)


def reflection_spectrum(mode, coupling_ratio, freq_grid):
    """One-port reflectance |1 - 2 eta / (1 + 2iQ (nu - nu0)/nu0)|^2 on a GHz grid.

    Returns an (n, 2) array of (frequency, reflectance).
    """
    nu = np.asarray(freq_grid, dtype=float)
    if nu.size == 0:
        raise ValueError("empty frequency grid")
    if not 0 <= coupling_ratio <= 1:
        raise ValueError("coupling_ratio must lie in [0, 1]")
    r = 1.0 - 2.0 * coupling_ratio / (1.0 + 2j * mode.Q * (nu - mode.nu0) / mode.nu0)
    return np.column_stack([nu, np.abs(r) ** 2])


def _lorentzian_dip(nu, baseline, depth, center, fwhm):
    return baseline - depth / (1.0 + (2.0 * (nu - center) / fwhm) ** 2)


def fit_reflection_q(spectrum):
    """Fit a Lorentzian dip to (freq, R) rows and return (Q, Q_err, params)."""
    spectrum = np.asarray(spectrum, dtype=float)
    nu, R = spectrum[:, 0], spectrum[:, 1]
    i_min = int(np.argmin(R))
    baseline = float(np.max(R))
    depth = baseline - float(R[i_min])
    half = baseline - depth / 2
    below = nu[R <= half]
    fwhm0 = float(below.max() - below.min()) if below.size > 1 else float(np.ptp(nu)) / 10
    p0 = [baseline, depth, float(nu[i_min]), max(fwhm0, 1e-12)]
    try:
        popt, pcov = curve_fit(_lorentzian_dip, nu, R, p0=p0, maxfev=20000)
    except RuntimeError as exc:
        raise FitError(str(exc), module="cavity") from exc
    center, fwhm = popt[2], abs(popt[3])
    perr = np.sqrt(np.abs(np.diag(pcov)))
    Q = center / fwhm
    Q_err = Q * math.hypot(perr[3] / fwhm, perr[2] / center)
    return Q, Q_err, dict(baseline=popt[0], depth=popt[1], center=center, fwhm=fwhm)
