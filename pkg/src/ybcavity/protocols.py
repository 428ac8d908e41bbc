"""Measurement protocols: lifetime, pump-probe, Rabi, Ramsey, echo, and noise calibration.

Every protocol builds pulse sequences for the Lindblad engine, averages the
A-channel emission over independently seeded spectral-diffusion paths, and
scales the mean by the shot count and detection efficiency.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm
from scipy.optimize import curve_fit

from .cavity import CavityMode, IonSite, enhanced_decay
from .errors import NumericalError
from .fitting import FitResult, fit_binned_exponential, fit_envelope, one_over_e_crossing
from .levels import LevelSystem, build_level_system, transition_cyclicity
from .lindblad import (
    Delay,
    Drive,
    PulseSequence,
    ReadoutWindow,
    build_generator,
    evolve,
    mixed_state,
)
from .noise import NoiseModel, average_over_noise, make_rng, ou_trace
from .photons import DetectionChain

TWO_PI = 2 * math.pi
PHASES = (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)


@dataclass(frozen=True)
class ProtocolConfig:
    readout_pulses: int = 50
    repetition_period: float = 20e-6
    shots: int = 2000
    noise_samples: int = 40
    stratified_noise: bool = True
    workers: int = 1
    shot_noise: bool = False
    ground_prior: dict = field(default_factory=lambda: {"g0": 1 / 3, "g1": 1 / 3, "gaux": 1 / 3})
    # initialisation by C pumping
    pump_rabi: float = TWO_PI * 5e6
    init_tol: float = 1e-10
    init_max_cycles: int = 100000
    # lifetime
    lifetime_rabi: float = TWO_PI * 50e6
    lifetime_bins: int = 100
    lifetime_span: float = 5.0  # in units of the expected lifetime
    # pump-probe
    pump_pulses: int = 50
    probe_rabi: float = TWO_PI * 50e6
    # Rabi
    rabi_rate: float = TWO_PI * 10e6
    # Ramsey / echo
    coherence_rabi: float = TWO_PI * 100e6
    ramsey_detuning: float = TWO_PI * 10e6
    coherence_readout: float = 10e-6
    ramsey_model: str = "stretched"
    echo_model: str = "exponential"
    tol: float = 1e-9

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.noise_samples < 1:
            raise ValueError("noise_samples must be >= 1")
        if self.readout_pulses < 1 or self.pump_pulses < 0:
            raise ValueError("pulse counts must be positive")
        if not self.repetition_period > 0:
            raise ValueError("repetition_period must be > 0")


@dataclass(frozen=True)
class System:
    levels: LevelSystem = field(default_factory=build_level_system)
    mode: CavityMode = field(default_factory=CavityMode)
    site: IonSite = field(default_factory=IonSite)
    noise: NoiseModel = field(default_factory=NoiseModel)
    chain: DetectionChain = field(default_factory=DetectionChain)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    @property
    def rates(self):
        return enhanced_decay(self.levels, self.site, self.mode)

    def with_noise(self, noise):
        return replace(self, noise=noise)


@dataclass
class ProtocolResult:
    name: str
    x_label: str
    x: np.ndarray
    counts: np.ndarray
    err: np.ndarray
    fit: FitResult | None = None
    summary: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # additional named columns

    def columns(self):
        cols = {self.x_label: self.x, "counts": self.counts, "err": self.err}
        cols.update(self.extra)
        return cols


# -- shared machinery -------------------------------------------------------

def _pi_time(rabi, area=math.pi):
    return area / rabi


class _EmissionTask:
    """Runs a list of sequences back to back for one noise sample.

    Returns the concatenated readout emission of every ReadoutWindow of every
    sequence in ``programs``; each program restarts from ``rho0``.
    """

    def __init__(self, system, rho0, programs):
        self.system = system
        self.rho0 = rho0
        self.programs = programs

    def __call__(self, rng, start_quantile=None):
        sys = self.system
        rates = sys.rates
        out = []
        seed = int(rng.integers(2**63))
        cache = {}
        for program in self.programs:
            duration = sum(s.duration for s in program)
            trace = None
            if sys.noise.sigma > 0:
                # the same slow detuning path for every program of this sample
                trace = ou_trace(sys.noise, duration, make_rng(seed), start_quantile=start_quantile)
            rho = self.rho0
            t = 0.0
            frame = None
            for seq in program:
                res = evolve(
                    rho, seq, sys.levels, rates, sys.noise, trace, tol=sys.protocol.tol, t0=t, frame=frame, cache=cache
                )
                rho, t, frame = res.final, res.t_end, res.frame
                for r in res.readouts:
                    out.append(r)
        return np.concatenate(out) if out else np.zeros(0)


def _mean_emission(system, rho0, programs, seed, n_samples=None):
    n = n_samples or system.protocol.noise_samples
    if system.noise.sigma == 0:
        n = 1
    task = _EmissionTask(system, rho0, programs)
    return average_over_noise(task, n, seed, workers=system.protocol.workers, stratified=system.protocol.stratified_noise)


def _to_counts(system, mean, sem, shots, seed):
    eta = system.chain.efficiency
    expected = shots * eta * np.asarray(mean)
    spread = shots * eta * np.asarray(sem)
    if system.protocol.shot_noise:
        counts = make_rng(seed, 99).poisson(np.clip(expected, 0, None)).astype(float)
    else:
        counts = expected
    err = np.sqrt(np.clip(counts, 0, None) + spread**2)
    return counts, err


def prior_state(system):
    return mixed_state(system.levels, system.protocol.ground_prior)


def _cycle_superop(system, drive, wait, noise_delta=0.0):
    lv, rates = system.levels, system.rates
    Gp = build_generator(lv, rates, drive, noise_delta, system.noise)
    Gw = build_generator(lv, rates, Delay(wait), noise_delta, system.noise, frame=(drive.transition, drive.detuning))
    return expm(Gw * wait) @ expm(Gp * drive.duration)


def initialize(system, detuning=0.0, rabi=None, rho0=None):
    """Fixed point of repeated C pumping starting from the ground prior.

    Each cycle is a C pi pulse followed by free decay for the rest of the
    repetition period.  The fixed point is reached by repeated squaring of
    the one-cycle map; population shelved in ``gaux`` stays there, so the
    A-readable fraction settles below one.
    """
    p = system.protocol
    rabi = p.pump_rabi if rabi is None else rabi
    d = system.levels.dim
    rho0 = prior_state(system) if rho0 is None else rho0
    if rabi == 0:
        return rho0
    t_p = _pi_time(rabi)
    S = _cycle_superop(system, Drive("C", rabi, t_p, detuning), p.repetition_period - t_p)
    v = rho0.reshape(-1)
    n = 1
    while n < p.init_max_cycles:
        v_next = S @ v
        if np.max(np.abs(v_next - v)) < p.init_tol:
            v = v_next
            break
        S = S @ S
        v = v_next
        n *= 2
    else:
        raise NumericalError("C pumping did not converge", module="protocols")
    # end the cycle with the ion in the ground manifold
    rho = v.reshape(d, d)
    return 0.5 * (rho + rho.conj().T) / np.trace(rho).real


def readable_population(system, rho):
    i = system.levels.index(system.levels.transition("A").lower)
    return float(rho[i, i].real)


# -- lifetime ---------------------------------------------------------------

def run_lifetime(system, edges=None, seed=0):
    """Time-resolved emission after an A pi pulse, fitted with an exponential."""
    p = system.protocol
    rates = system.rates
    if edges is None:
        edges = np.linspace(0.0, p.lifetime_span * rates.tau, p.lifetime_bins + 1)
    edges = np.asarray(edges, dtype=float)
    if edges[-1] - edges[0] < 3 * rates.tau:
        raise ValueError(f"delay grid spans {edges[-1] - edges[0]:.3g} s, need >= 3 tau = {3 * rates.tau:.3g} s")
    t_pi = _pi_time(p.lifetime_rabi)
    segs = [Drive("A", p.lifetime_rabi, t_pi)]
    if edges[0] > 0:
        segs.append(Delay(edges[0]))
    widths = np.diff(edges)
    if np.allclose(widths, widths[0], rtol=1e-12, atol=0):
        segs.append(ReadoutWindow(edges[-1] - edges[0], bins=widths.size))
    else:
        segs.extend(ReadoutWindow(w) for w in widths)
    rho0 = mixed_state(system.levels, {system.levels.transition("A").lower: 1.0})
    mean, sem = _mean_emission(system, rho0, [[PulseSequence(tuple(segs))]], seed)
    counts, err = _to_counts(system, mean, sem, p.shots, seed)
    fit = fit_binned_exponential(edges, counts, sigma=np.maximum(err, 1e-12 * counts.max()) if p.shot_noise else None)
    tau = fit.params["tau"]
    summary = {
        "tau_fit": tau,
        "tau_err": fit.errors["tau"],
        "tau_expected": rates.tau,
        "F_eff": rates.F_eff,
        "lifetime_reduction": system.levels.bulk_lifetime / tau,
    }
    return ProtocolResult("lifetime", "delay_s", edges[:-1], counts, err, fit, summary)


# -- pump-probe -------------------------------------------------------------

def rate_model_initialization(system):
    """g1 population after exhaustive C pumping, from branching alone."""
    rates = system.rates
    prior = system.protocol.ground_prior
    total = sum(prior.values())
    p_read = prior.get(system.levels.transition("A").lower, 0.0) / total
    p_pumped = prior.get(system.levels.transition("C").lower, 0.0) / total
    g_A, g_aux = rates.channels["A"], rates.channels.get("aux", 0.0)
    return p_read + p_pumped * g_A / (g_A + g_aux)


def run_pump_probe(system, pump_offsets, seed=0, pump_rabi=None):
    """Probe counts on A versus pump detuning around C.

    ``pump_offsets`` are pump - C detunings in MHz.  The pump train of
    ``pump_pulses`` pulses starts from the ground prior; after the ion has
    relaxed, a pi pulse on A reads out the g1 population.
    """
    p = system.protocol
    rates = system.rates
    pump_rabi = p.pump_rabi if pump_rabi is None else pump_rabi
    offsets = np.asarray(pump_offsets, dtype=float)
    period = p.repetition_period
    t_probe = _pi_time(p.probe_rabi)
    probe = PulseSequence((Drive("A", p.probe_rabi, t_probe), ReadoutWindow(period - t_probe)))
    settle = PulseSequence((Delay(5 * rates.tau),))
    programs = []
    for off in offsets:
        if pump_rabi > 0 and p.pump_pulses > 0:
            t_p = _pi_time(pump_rabi)
            pump = PulseSequence(
                (Drive("C", pump_rabi, t_p, detuning=TWO_PI * off * 1e6), Delay(period - t_p)),
                repetitions=p.pump_pulses,
            )
            programs.append([pump, settle, probe])
        else:
            programs.append([settle, probe])
    mean, sem = _mean_emission(system, prior_state(system), programs, seed)
    counts, err = _to_counts(system, mean, sem, p.shots, seed)
    baseline_prog = [[settle, probe]]
    base_mean, _ = _mean_emission(system, prior_state(system), baseline_prog, seed)
    baseline = p.shots * system.chain.efficiency * float(base_mean[0])
    i_pk = int(np.argmax(counts))
    prior = p.ground_prior
    p_read = prior.get(system.levels.transition("A").lower, 0.0) / sum(prior.values())
    summary = {
        "peak_offset_MHz": float(offsets[i_pk]),
        "peak_counts": float(counts[i_pk]),
        "baseline_counts": baseline,
        "contrast": float(counts[i_pk] / baseline) if baseline > 0 else float("nan"),
        "rate_model_contrast": rate_model_initialization(system) / p_read if p_read > 0 else float("nan"),
        "initialized_population": rate_model_initialization(system),
    }
    return ProtocolResult("pump-probe", "pump_offset_MHz", offsets, counts, err, None, summary)


# -- Rabi -------------------------------------------------------------------

def _rabi_model(t, a, omega, t_damp, c):
    return a * 0.5 * (1 - np.cos(omega * t) * np.exp(-t / t_damp)) + c


def run_rabi(system, durations, seed=0, rabi_rate=None, readout_pulses=None, rho0=None):
    """Readout-train counts versus A pulse duration after C initialisation.

    Each train holds ``readout_pulses`` A pulses one repetition period apart.
    ``counts`` are detected photons over ``shots`` trains; the extra column
    ``first_pulse`` is the mean emission after the first pulse alone.
    """
    p = system.protocol
    rabi_rate = p.rabi_rate if rabi_rate is None else rabi_rate
    n_pulses = p.readout_pulses if readout_pulses is None else readout_pulses
    durations = np.asarray(durations, dtype=float)
    period = p.repetition_period
    if np.any(durations >= period):
        raise ValueError("pulse durations must be shorter than the repetition period")
    rho_init = initialize(system) if rho0 is None else rho0
    programs = []
    for d in durations:
        seg = (Drive("A", rabi_rate, d), ReadoutWindow(period - d))
        programs.append([PulseSequence(seg, repetitions=n_pulses, period=period)])
    mean, sem = _mean_emission(system, rho_init, programs, seed)
    mean = mean.reshape(durations.size, n_pulses)
    sem = sem.reshape(durations.size, n_pulses)
    per_train = mean.sum(axis=1)
    per_train_sem = np.sqrt((sem**2).sum(axis=1))
    counts, err = _to_counts(system, per_train, per_train_sem, p.shots, seed)
    first = mean[:, 0]
    g1 = readable_population(system, rho_init)
    summary = {
        "rabi_rate_set": rabi_rate,
        "initialized_population": g1,
        "max_photons_per_train": float(per_train.max()),
        "max_photons_per_initialized_ion": float(per_train.max() / g1),
        "cyclicity": transition_cyclicity(system.levels, system.rates.F_eff),
    }
    fit = None
    if durations.size >= 5 and first.max() > 0:
        try:
            popt, pcov = curve_fit(
                _rabi_model, durations, first,
                p0=[first.max(), rabi_rate, 10 * durations.max(), 0.0], maxfev=20000,
            )
            perr = np.sqrt(np.abs(np.diag(pcov)))
            resid = first - _rabi_model(durations, *popt)
            fit = FitResult(
                "damped_rabi",
                dict(amplitude=popt[0], rabi_rate=abs(popt[1]), damping_time=popt[2], offset=popt[3]),
                dict(amplitude=perr[0], rabi_rate=perr[1], damping_time=perr[2], offset=perr[3]),
                float(np.mean(resid**2)),
                resid,
            )
            summary["rabi_rate_fit"] = abs(popt[1])
        except RuntimeError:
            fit = None
    extra = {"photons_per_train": per_train, "first_pulse": first}
    return ProtocolResult("rabi", "duration_s", durations, counts, err, fit, summary, extra)


def photon_budget(system, n_pulses_list, rabi_rate=None, seed=0):
    """Emitted A photons per train for increasing train lengths at the pi area."""
    p = system.protocol
    rabi_rate = p.rabi_rate if rabi_rate is None else rabi_rate
    t_pi = _pi_time(rabi_rate)
    rho_init = initialize(system)
    g1 = readable_population(system, rho_init)
    out = []
    for n in n_pulses_list:
        res = run_rabi(system, [t_pi], seed=seed, rabi_rate=rabi_rate, readout_pulses=int(n), rho0=rho_init)
        out.append(res.extra["photons_per_train"][0] / g1)
    return np.array(out)


# -- Ramsey and echo ----------------------------------------------------------

def _coherence_programs(system, delays, echo):
    p = system.protocol
    W = p.coherence_rabi
    det = 0.0 if echo else p.ramsey_detuning
    t2 = _pi_time(W, math.pi / 2)
    programs = []
    for tau in delays:
        for phi in PHASES:
            segs = [Drive("A", W, t2, det, 0.0)]
            if echo:
                segs += [Delay(tau / 2), Drive("A", W, 2 * t2, det, 0.0), Delay(tau / 2)]
            else:
                segs.append(Delay(tau))
            segs += [Drive("A", W, t2, det, phi), ReadoutWindow(p.coherence_readout)]
            programs.append([PulseSequence(tuple(s for s in segs if s.duration > 0 or isinstance(s, Drive)))])
    return programs


def _contrast(mean, sem):
    P = mean.reshape(-1, 4)
    E = sem.reshape(-1, 4)
    total = P[:, 0] + P[:, 2]
    c = np.hypot(P[:, 0] - P[:, 2], P[:, 1] - P[:, 3]) / total
    c_err = np.sqrt((E**2).sum(axis=1)) / total
    return c, c_err


def _run_coherence(system, delays, seed, echo, model, n_samples):
    p = system.protocol
    delays = np.asarray(delays, dtype=float)
    rho_init = initialize(system)
    mean, sem = _mean_emission(system, rho_init, _coherence_programs(system, delays, echo), seed, n_samples)
    contrast, c_err = _contrast(mean, sem)
    P = mean.reshape(-1, 4)
    E = sem.reshape(-1, 4)
    counts, err = _to_counts(system, P[:, 0], E[:, 0], p.shots, seed)
    sigma = np.maximum(c_err, 1e-3) if np.any(c_err > 0) else None
    fit = fit_envelope(delays, contrast, model=model, sigma=sigma)
    return delays, counts, err, contrast, c_err, fit


def run_ramsey(system, delays, seed=0, model=None, n_samples=None):
    """Two pi/2 pulses separated by each delay; T2* is the 1/e point of the contrast."""
    model = model or system.protocol.ramsey_model
    delays, counts, err, contrast, c_err, fit = _run_coherence(system, delays, seed, False, model, n_samples)
    T = fit.params["T"]
    summary = {
        "T2_star": T,
        "T2_star_err": fit.errors["T"],
        "T2_star_interp": one_over_e_crossing(delays, contrast),
        "effective_linewidth_MHz": 1.0 / (math.pi * T) / 1e6,
        "contrast_at_zero": float(contrast[np.argmin(delays)]),
    }
    return ProtocolResult("ramsey", "delay_s", delays, counts, err, fit, summary, {"contrast": contrast, "contrast_err": c_err})


def run_echo(system, delays, seed=0, model=None, n_samples=None):
    """pi/2 - tau/2 - pi - tau/2 - pi/2; T2 is the 1/e point of the contrast."""
    model = model or system.protocol.echo_model
    delays, counts, err, contrast, c_err, fit = _run_coherence(system, delays, seed, True, model, n_samples)
    summary = {
        "T2": fit.params["T"],
        "T2_err": fit.errors["T"],
        "T2_interp": one_over_e_crossing(delays, contrast),
        "contrast_at_zero": float(contrast[np.argmin(delays)]),
    }
    return ProtocolResult("echo", "delay_s", delays, counts, err, fit, summary, {"contrast": contrast, "contrast_err": c_err})


# -- calibration --------------------------------------------------------------

@dataclass
class Calibration:
    noise: NoiseModel
    T2_star: float
    T2: float
    iterations: int
    history: list


def quasi_static_guess(T2_star, T2, gamma_total, tau_c=1e-3):
    """Closed-form (sigma, gamma_phi) for Gaussian quasi-static noise plus Markovian dephasing.

    Echo contrast decays as exp(-(gamma_phi + gamma_total) t / 2); Ramsey adds
    exp(-sigma^2 t^2 / 2).  Returns sigma = 0 when the echo alone explains T2*.
    """
    gamma_phi = max(0.0, 2.0 / T2 - gamma_total)
    rate = 0.5 * (gamma_phi + gamma_total)
    s2 = 2.0 * (1.0 - rate * T2_star) / T2_star**2
    sigma = math.sqrt(s2) if s2 > 0 else 0.0
    return NoiseModel(sigma=sigma, tau_c=tau_c, gamma_phi=gamma_phi)


def calibrate_noise(
    system, T2_star=69e-9, T2=330e-9, tau_c=1e-3, n_samples=200, seed=0, max_iter=8, rtol=0.02, n_delays=25
):
    """Fit (sigma, gamma_phi) so that simulated Ramsey and echo hit the targets.

    Starts from :func:`quasi_static_guess` and corrects by re-simulating:
    gamma_phi moves by twice the echo decay-rate mismatch, sigma scales with
    the Ramsey 1/e ratio.  Fails if the targets are not met within 10%
    after ``max_iter`` rounds.
    """
    if not (T2_star > 0 and T2 > 0):
        raise ValueError("targets must be positive")
    if T2 < T2_star:
        raise ValueError("T2 must be >= T2*")
    gamma_total = system.rates.gamma_total
    noise = quasi_static_guess(T2_star, T2, gamma_total, tau_c)
    r_delays = np.linspace(0.0, 3.0 * T2_star, n_delays)
    e_delays = np.linspace(0.0, 3.0 * T2, n_delays)
    history = []
    t_star = t_echo = float("nan")
    for it in range(1, max_iter + 1):
        sys_n = system.with_noise(noise)
        t_star = run_ramsey(sys_n, r_delays, seed=seed, n_samples=n_samples).summary["T2_star"]
        t_echo = run_echo(sys_n, e_delays, seed=seed + 1, n_samples=n_samples).summary["T2"]
        history.append({"sigma": noise.sigma, "gamma_phi": noise.gamma_phi, "T2_star": t_star, "T2": t_echo})
        if abs(t_star / T2_star - 1) < rtol and abs(t_echo / T2 - 1) < rtol:
            break
        gamma_phi = max(0.0, noise.gamma_phi + 2.0 * (1.0 / T2 - 1.0 / t_echo))
        sigma = noise.sigma * (t_star / T2_star) if noise.sigma > 0 else 0.0
        noise = NoiseModel(sigma=sigma, tau_c=tau_c, gamma_phi=gamma_phi)
    else:
        if abs(t_star / T2_star - 1) > 0.1 or abs(t_echo / T2 - 1) > 0.1:
            raise NumericalError(
                f"calibration did not converge after {max_iter} iterations "
                f"(T2*={t_star:.3g}, T2={t_echo:.3g})",
                module="protocols",
            )
        noise = NoiseModel(**{k: history[-1][k] for k in ("sigma", "gamma_phi")}, tau_c=tau_c)
    return Calibration(noise, t_star, t_echo, len(history), history)
