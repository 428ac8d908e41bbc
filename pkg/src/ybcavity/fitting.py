"""Least-squares fits used by the protocols."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit

from .errors import FitError


@dataclass
class FitResult:
    model: str
    params: dict
    errors: dict
    goodness: float  # reduced chi^2 (or mean squared residual without weights)
    residuals: np.ndarray = field(default=None, repr=False)

    def as_dict(self):
        return {
            "model": self.model,
            "params": {k: float(v) for k, v in self.params.items()},
            "errors": {k: float(v) for k, v in self.errors.items()},
            "goodness": float(self.goodness),
        }


def _finish(model, names, popt, pcov, resid, sigma, n, scale=1.0):
    if np.all(np.isfinite(pcov)):
        perr = np.sqrt(np.clip(np.diag(pcov), 0, None))
    elif np.max(np.abs(resid)) <= 1e-9 * scale:
        # exact fit to noiseless data: no scatter, so no parameter spread
        perr = np.zeros(len(popt))
    else:
        perr = np.full(len(popt), np.inf)
    dof = max(n - len(popt), 1)
    if sigma is None:
        good = float(np.mean(resid**2))
    else:
        good = float(np.sum((resid / sigma) ** 2) / dof)
    return FitResult(model, dict(zip(names, map(float, popt))), dict(zip(names, map(float, perr))), good, resid)


def fit_binned_exponential(edges, counts, sigma=None):
    """Fit bin-integrated counts with N tau (exp(-t0/tau) - exp(-t1/tau)) + background.

    Integrating the model over each bin makes the fit exact for noiseless
    data regardless of bin width.
    """
    edges = np.asarray(edges, dtype=float)
    counts = np.asarray(counts, dtype=float)
    t0, t1 = edges[:-1], edges[1:]
    width = t1 - t0

    def model(_, amp, tau, bg):
        return amp * tau * (np.exp(-(t0 - t0[0]) / tau) - np.exp(-(t1 - t0[0]) / tau)) + bg * width

    # log-slope starting guess
    pos = counts > 0
    if pos.sum() < 2:
        raise FitError("not enough non-zero bins for an exponential fit", module="protocols")
    slope = np.polyfit(t0[pos], np.log(counts[pos] / width[pos]), 1)[0]
    tau0 = -1.0 / slope if slope < 0 else (edges[-1] - edges[0])
    amp0 = counts[0] / width[0]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OptimizeWarning)
            popt, pcov = curve_fit(
                model, t0, counts, p0=[amp0, tau0, 0.0], sigma=sigma, absolute_sigma=sigma is not None,
                maxfev=20000, xtol=1e-14, ftol=1e-14,
            )
    except RuntimeError as exc:
        raise FitError(f"exponential fit failed: {exc}", module="protocols") from exc
    resid = counts - model(t0, *popt)
    names = ("amplitude", "tau", "background")
    return _finish("binned_exponential", names, popt, pcov, resid, sigma, counts.size, np.max(np.abs(counts)))


ENVELOPES = {
    "gaussian": (lambda x, A, T: A * np.exp(-((x / T) ** 2)), ("amplitude", "T")),
    "exponential": (lambda x, A, T: A * np.exp(-x / T), ("amplitude", "T")),
    "stretched": (lambda x, A, T, p: A * np.exp(-np.abs(x / T) ** p), ("amplitude", "T", "p")),
}


def fit_envelope(x, y, model="stretched", sigma=None):
    """Fit a decaying envelope; for every model the 1/e point relative to the amplitude is T."""
    if model not in ENVELOPES:
        raise ValueError(f"unknown envelope model {model!r}; choose from {sorted(ENVELOPES)}")
    fn, names = ENVELOPES[model]
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A0 = float(y[np.argmin(x)])
    target = A0 / np.e
    below = np.nonzero(y < target)[0]
    T0 = float(x[below[0]]) if below.size else float(x.max()) * 2
    T0 = max(T0, float(np.min(x[x > 0])) if np.any(x > 0) else 1.0)
    p0 = [A0, T0] + ([1.5] if model == "stretched" else [])
    bounds = ([0, 0] + ([0.3] if model == "stretched" else []), [np.inf, np.inf] + ([4.0] if model == "stretched" else []))
    if sigma is not None:
        sigma = np.maximum(np.asarray(sigma, dtype=float), 1e-12)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OptimizeWarning)
            popt, pcov = curve_fit(fn, x, y, p0=p0, sigma=sigma, absolute_sigma=sigma is not None, bounds=bounds, maxfev=20000)
    except (RuntimeError, ValueError) as exc:
        raise FitError(f"{model} envelope fit failed: {exc}", module="protocols") from exc
    resid = y - fn(x, *popt)
    return _finish(model, names, popt, pcov, resid, sigma, y.size, np.max(np.abs(y)))


def one_over_e_crossing(x, y):
    """First delay at which y falls below y[0]/e, by linear interpolation (nan if never)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float) / y[0]
    idx = np.nonzero(y < 1 / np.e)[0]
    if idx.size == 0 or idx[0] == 0:
        return float("nan")
    i = idx[0]
    return float(x[i - 1] + (1 / np.e - y[i - 1]) * (x[i] - x[i - 1]) / (y[i] - y[i - 1]))
