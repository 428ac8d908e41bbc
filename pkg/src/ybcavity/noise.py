"""Spectral diffusion as an Ornstein-Uhlenbeck detuning, and seeded noise averaging."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter
from scipy.special import ndtri

from .errors import ConfigError, NumericalError


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0  # stationary std of the optical detuning, rad/s
    tau_c: float = 1e-3  # s
    gamma_phi: float = 0.0  # fast pure dephasing, s^-1

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigError("noise.sigma", f"must be >= 0, got {self.sigma}")
        if not self.tau_c > 0:
            raise ConfigError("noise.tau_c", f"must be > 0, got {self.tau_c}")
        if not self.gamma_phi >= 0:
            raise ConfigError("noise.gamma_phi", f"must be >= 0, got {self.gamma_phi}")

    @property
    def max_step(self):
        """Longest interval over which the slow detuning may be held constant."""
        return self.tau_c / 100.0


@dataclass(frozen=True)
class NoiseTrace:
    """Detuning samples ``values[k]`` held on ``[t0 + k dt, t0 + (k+1) dt)``."""

    dt: float
    values: np.ndarray
    t0: float = 0.0

    def at(self, t):
        k = int((t - self.t0) // self.dt)
        k = min(max(k, 0), len(self.values) - 1)
        return float(self.values[k])

    def next_boundary(self, t):
        k = math.floor((t - self.t0) / self.dt)
        return self.t0 + (k + 1) * self.dt


def make_rng(seed, *key):
    """Generator for stream ``key`` under ``seed``; independent of call order."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key)))


def sample_ou(noise, dt, n_steps, seed, start_quantile=None):
    """Exact OU discretisation started from the stationary distribution.

    ``start_quantile`` in (0, 1) fixes the first value at that quantile of
    the stationary law instead of drawing it.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n_steps = int(n_steps)
    if noise.sigma == 0 or n_steps == 0:
        return np.zeros(n_steps)
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    a = math.exp(-dt / noise.tau_c)
    b = noise.sigma * math.sqrt(1.0 - a * a)
    xi = rng.standard_normal(n_steps)
    drive = b * xi
    x0 = xi[0] if start_quantile is None else ndtri(start_quantile)
    drive[0] = noise.sigma * x0
    # x_k = a x_{k-1} + drive_k
    return lfilter([1.0], [1.0, -a], drive)


def ou_trace(noise, duration, seed, t0=0.0, dt=None, start_quantile=None):
    """Noise trace covering ``[t0, t0 + duration]`` with the solver's step cap."""
    dt = noise.max_step if dt is None else min(dt, noise.max_step)
    n = int(math.ceil(duration / dt)) + 1
    return NoiseTrace(dt=dt, values=sample_ou(noise, dt, n, seed, start_quantile), t0=t0)


def autocovariance(x, max_lag):
    x = np.asarray(x, dtype=float)
    n = x.size
    return np.array([np.dot(x[: n - k], x[k:]) / (n - k) for k in range(max_lag + 1)])


def _run_sample(args):
    task, seed, index, strata = args
    try:
        if strata:
            # one start value per equal-probability stratum, jittered inside it
            u = (index + make_rng(seed, index, 1).random()) / strata
            return np.asarray(task(make_rng(seed, index), start_quantile=u), dtype=float)
        return np.asarray(task(make_rng(seed, index)), dtype=float)
    except NumericalError as exc:
        raise type(exc)(f"noise sample {index}: {exc}") from exc


def average_over_noise(task, n_samples, master_seed, workers=1, stratified=False):
    """Mean and standard error of ``task(rng)`` over independently seeded samples.

    ``task`` receives a Generator derived from ``(master_seed, index)`` and
    returns an array observable.  Results are reduced in index order, so the
    outcome does not depend on ``workers``.

    With ``stratified`` the task is also passed ``start_quantile``: sample i
    draws its initial noise value from the i-th of ``n_samples`` equal
    probability strata.  The mean stays unbiased; the reported standard
    error ignores the stratification and is therefore conservative.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    strata = n_samples if stratified else 0
    jobs = [(task, master_seed, i, strata) for i in range(n_samples)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_sample, jobs, chunksize=max(1, n_samples // (4 * workers))))
    else:
        results = [_run_sample(j) for j in jobs]
    data = np.stack(results)
    mean = data.mean(axis=0)
    if n_samples > 1:
        sem = data.std(axis=0, ddof=1) / math.sqrt(n_samples)
    else:
        sem = np.zeros_like(mean)
    return mean, sem
