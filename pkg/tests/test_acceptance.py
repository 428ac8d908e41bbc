"""One test per acceptance criterion; each prints a PASS or FAIL line."""
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

import ybcavity.protocols as protocols
from ybcavity.bragg import mirror_transmission, quarter_wave_cell, stack_bandgap, unit_cell_matrix
from ybcavity.cavity import DecayRates, IonSite, enhanced_decay, fit_reflection_q, purcell_peak, reflection_spectrum
from ybcavity.cli import g2_background_rate, main
from ybcavity.ensemble import EnsembleConfig, lifetime_distribution, ple_spectrum, sample_sites
from ybcavity.levels import BULK_LIFETIME, branching_from_observables, transition_cyclicity
from ybcavity.lindblad import Delay, Drive, PulseSequence, ReadoutWindow, evolve, excited_population, pure_state, sequence
from ybcavity.noise import NoiseModel, autocovariance, make_rng, sample_ou
from ybcavity.photons import DetectionChain, Emitter, bunching_ratio, g2_background_oracle, g2_pulsed, simulate_record
from ybcavity.protocols import (
    ProtocolConfig,
    calibrate_noise,
    initialize,
    photon_budget,
    run_echo,
    run_lifetime,
    run_pump_probe,
    run_rabi,
    run_ramsey,
)

from test_noise import ar1_autocov_se

RESULTS = []
TWO_PI = 2 * math.pi
PERIOD = 20e-6


def report(number, title, checks, elapsed, budget):
    """Print the verdict line and fail the test on any failed check."""
    checks = list(checks) + [(f"runtime {elapsed:.1f} s < {budget:g} s", elapsed < budget)]
    ok = all(c for _, c in checks)
    failed = [d for d, c in checks if not c]
    detail = "; ".join(d for d, _ in checks)
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, "failed: " + "; ".join(failed)


def test_criterion_1_purcell(levels, mode, strong_site):
    t0 = time.perf_counter()
    F = purcell_peak(5300, 1.7)
    tau = enhanced_decay(levels, strong_site, mode).tau
    F_eff = enhanced_decay(levels, strong_site, mode).F_eff
    tau_bulk = enhanced_decay(levels, IonSite(transverse_factor=0.0), mode).tau
    report(1, "Purcell factor and lifetimes", [
        (f"F_max={F:.3f} (236.9 +/- 0.1)", abs(F - 236.9) <= 0.1),
        (f"F*beta_A={F_eff * levels.branch_A:.2f}, tau={tau * 1e6:.4f} us (4.2 +/- 1%)", abs(tau / 4.2e-6 - 1) <= 0.01),
        (f"tau(F=0)={tau_bulk * 1e6:.2f} us (268.8)", tau_bulk == pytest.approx(268.8e-6, rel=1e-12)),
    ], time.perf_counter() - t0, 1)


def test_criterion_2_branching(levels, mode, orange_site):
    t0 = time.perf_counter()
    beta = branching_from_observables(6.556, 10)
    F_eff = enhanced_decay(levels, orange_site, mode).F_eff
    tau = enhanced_decay(levels, orange_site, mode).tau
    cyc = transition_cyclicity(levels, F_eff)
    report(2, "branching and cyclicity", [
        (f"beta_A={beta:.4f} (0.404 +/- 0.001)", abs(beta - 0.404) <= 0.001),
        (f"cyclicity at tau={tau * 1e6:.1f} us = {cyc:.3f} (10 +/- 0.1)", abs(cyc - 10) <= 0.1),
    ], time.perf_counter() - t0, 1)


def test_criterion_3_solver(levels, mode, strong_site, orange_system, monkeypatch):
    t0 = time.perf_counter()
    no_decay = DecayRates(gamma_total=0.0, F_eff=0.0, channels={"A": 0.0, "C": 0.0, "aux": 0.0})
    W = TWO_PI * 20e6
    rabi_err = 0.0
    for t in np.linspace(0, 150e-9, 31):
        res = evolve(pure_state(levels, "g1"), sequence(Drive("A", W, t)), levels, no_decay)
        rabi_err = max(rabi_err, abs(excited_population(levels, res.final) - math.sin(W * t / 2) ** 2))
    rates = enhanced_decay(levels, strong_site, mode)
    decay_err = 0.0
    for t in np.linspace(0, 30e-6, 31):
        res = evolve(pure_state(levels, "e0"), sequence(Delay(t)), levels, rates)
        decay_err = max(decay_err, abs(excited_population(levels, res.final) - math.exp(-rates.gamma_total * t)))

    # record the trace at every segment boundary of every protocol run
    worst = [0.0]
    calls = [0]
    real_evolve = protocols.evolve

    def traced(*args, **kwargs):
        res = real_evolve(*args, **kwargs)
        calls[0] += 1
        worst[0] = max(worst[0], max(abs(np.trace(s) - 1) for s in res.states))
        return res

    monkeypatch.setattr(protocols, "evolve", traced)
    sys_ = replace(
        orange_system.with_noise(NoiseModel(sigma=TWO_PI * 2.9e6, gamma_phi=6e6)),
        protocol=ProtocolConfig(noise_samples=3),
    )
    run_lifetime(sys_)
    run_pump_probe(sys_, [-5.0, 0.0, 5.0])
    run_rabi(sys_, np.linspace(0, 100e-9, 6))
    run_ramsey(sys_, np.linspace(0, 150e-9, 6))
    run_echo(sys_, np.linspace(0, 600e-9, 6))
    init = initialize(sys_)
    worst[0] = max(worst[0], abs(np.trace(init) - 1))
    report(3, "solver accuracy", [
        (f"Rabi max |err|={rabi_err:.1e} (<1e-6)", rabi_err < 1e-6),
        (f"decay max |err|={decay_err:.1e} (<1e-6)", decay_err < 1e-6),
        (f"trace max |err|={worst[0]:.1e} over {calls[0]} protocol evolutions (<1e-9)", worst[0] < 1e-9),
    ], time.perf_counter() - t0, 10)


def test_criterion_4_calibration(orange_system):
    t0 = time.perf_counter()
    cal = calibrate_noise(orange_system, T2_star=69e-9, T2=330e-9, tau_c=1e-3, n_samples=200, seed=1)
    sys_ = orange_system.with_noise(cal.noise)
    # independent noise realisations for the check
    ramsey = run_ramsey(sys_, np.linspace(0, 207e-9, 25), seed=1001, n_samples=200)
    echo = run_echo(sys_, np.linspace(0, 990e-9, 25), seed=1002, n_samples=200)
    t2s = ramsey.summary["T2_star"]
    t2 = echo.summary["T2"]
    lw = 1 / (math.pi * t2s) / 1e6
    report(4, "noise calibration", [
        (f"sigma/2pi={cal.noise.sigma / TWO_PI / 1e6:.3f} MHz, gamma_phi={cal.noise.gamma_phi:.3g}/s", True),
        (f"T2*={t2s * 1e9:.1f} ns (69 +/- 15%)", abs(t2s / 69e-9 - 1) <= 0.15),
        (f"T2={t2 * 1e9:.1f} ns (330 +/- 15%)", abs(t2 / 330e-9 - 1) <= 0.15),
        (f"linewidth={lw:.3f} MHz (in [4.4, 4.8])", 4.4 <= lw <= 4.8),
    ], time.perf_counter() - t0, 300)


def test_criterion_5_photon_statistics(levels, mode, strong_site, strong_system):
    t0 = time.perf_counter()
    rates = enhanced_decay(levels, strong_site, mode)
    W = TWO_PI * 50e6
    seq = PulseSequence((Drive("A", W, math.pi / W), ReadoutWindow(PERIOD - math.pi / W)))
    shots = 100_000
    ideal = DetectionChain(background_rate=0.0, dark_count_rate=0.0)
    single = g2_pulsed(simulate_record([Emitter(levels, rates)], seq, ideal, shots, 1))

    bg = g2_background_rate(strong_system, seq, 0.163)
    noisy = g2_pulsed(simulate_record([Emitter(levels, rates)], seq, replace(ideal, background_rate=bg), shots, 2))
    two = g2_pulsed(simulate_record([Emitter(levels, rates)] * 2, seq, ideal, shots, 3))

    # slow spectral diffusion under a weak drive modulates the brightness
    noise = NoiseModel(sigma=TWO_PI * 2.9e6, tau_c=1e-3)
    w = TWO_PI * 3e6
    seq_ou = PulseSequence((Drive("A", w, math.pi / w), ReadoutWindow(PERIOD - math.pi / w)))
    rec = simulate_record([Emitter(levels, rates, noise)], seq_ou, ideal, shots, 4)
    ou = g2_pulsed(rec, max_lag=600, far_lag_min=400)  # normalised beyond 8 ms
    near = bunching_ratio(ou, 1e-3)
    lags = ou.peak_lags * ou.period
    tail = ou.peak_g2[(lags >= 5e-3) & (lags < 8e-3)].mean()
    report(5, "photon statistics", [
        (f"single g2(0)={single.g2_zero:.4f} (<0.05)", single.g2_zero < 0.05),
        (f"background 0.163 g2(0)={noisy.g2_zero:.3f} (0.26 +/- 0.05; oracle {g2_background_oracle(0.163):.3f})",
         abs(noisy.g2_zero - 0.26) <= 0.05),
        (f"two emitters g2(0)={two.g2_zero:.3f} (0.5 +/- 0.05)", abs(two.g2_zero - 0.5) <= 0.05),
        (f"OU bunching ratio below 1 ms={near:.3f} (>1)", near > 1),
        (f"OU g2 over 5-8 ms={tail:.3f} (1 +/- 0.05)", abs(tail - 1) <= 0.05),
    ], time.perf_counter() - t0, 600)


def test_criterion_6_rabi_and_budget(orange_system):
    t0 = time.perf_counter()
    p = orange_system.protocol
    res = run_rabi(orange_system, np.linspace(0, 300e-9, 31))
    omega = res.summary["rabi_rate_fit"]
    lengths = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000]
    budget = photon_budget(orange_system, lengths)
    monotone = bool(np.all(np.diff(budget) >= -1e-12))
    flat = abs(budget[-1] - budget[-2]) / budget[-1]
    report(6, "Rabi readout and photon budget", [
        (f"fitted Rabi rate/2pi={omega / TWO_PI / 1e6:.3f} MHz (set {p.rabi_rate / TWO_PI / 1e6:g}, 1%)",
         abs(omega / p.rabi_rate - 1) <= 0.01),
        (f"budget at {lengths[-1]} pulses={budget[-1]:.3f} (10 +/- 1)", abs(budget[-1] - 10) <= 1),
        (f"monotone={monotone}", monotone),
        (f"flat top: last doubling changes it by {flat:.1e} (<1%)", flat < 0.01),
    ], time.perf_counter() - t0, 300)


def test_criterion_7_cavity_optics(mode):
    t0 = time.perf_counter()
    nu = mode.nu0 + np.linspace(-200, 200, 801)
    Q, _, _ = fit_reflection_q(reflection_spectrum(mode, 0.5, nu))
    cell = quarter_wave_cell()
    gaps = stack_bandgap(cell, np.linspace(800, 1200, 801))
    in_gap = any(lo <= 984.5 <= hi for lo, hi in gaps)
    T = np.array([mirror_transmission(cell, n) for n in range(5, 21)])
    ratios = T[1:] / T[:-1]
    spread = np.ptp(ratios) / ratios.mean()
    rng = make_rng(7)
    det_err = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 9))
        layers = list(zip(rng.uniform(1.0, 4.0, k), rng.uniform(1.0, 500.0, k)))
        M = unit_cell_matrix(layers, float(rng.uniform(400, 2000)))
        det_err = max(det_err, abs(abs(np.linalg.det(M)) - 1))
    report(7, "cavity and mirror optics", [
        (f"refit Q={Q:.1f} (5300 +/- 1%)", abs(Q / 5300 - 1) <= 0.01),
        (f"gaps={[(round(a, 1), round(b, 1)) for a, b in gaps]} contain 984.5 nm: {in_gap}", in_gap),
        (f"T(n+1)/T(n) spread={spread:.1e} (<1%)", spread < 0.01),
        (f"max ||det|-1| over 100 stacks={det_err:.1e} (<1e-9)", det_err < 1e-9),
    ], time.perf_counter() - t0, 10)


def test_criterion_8_noise_and_reproducibility(tmp_path):
    t0 = time.perf_counter()
    sigma, tau_c, dt, n = 1.0, 1e-3, 1e-4, 100_000
    x = sample_ou(NoiseModel(sigma=sigma, tau_c=tau_c), dt, n, 8)
    a = math.exp(-dt / tau_c)
    acov = autocovariance(x, 40)
    z = max(abs(acov[k] - sigma**2 * a**k) / ar1_autocov_se(sigma, a, k, n) for k in range(41))
    same = np.array_equal(x, sample_ou(NoiseModel(sigma=sigma, tau_c=tau_c), dt, n, 8))

    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "master_seed": 12,
        "site": {"preset": "orange"},
        "protocol": {"shots": 3000, "noise_samples": 8, "g2_max_lag": 40, "g2_far_lag_min": 20,
                     "ramsey_delays": {"start": 0, "stop": 2e-7, "num": 6}},
    }))
    identical = True
    for sub in ("g2", "ramsey", "ple"):
        for out in ("a", "b"):
            assert main([sub, "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
        for name in (f"{sub}.csv", f"{sub}.json", "resolved_config.json"):
            identical &= (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    report(8, "noise process and reproducibility", [
        (f"OU autocovariance max |z| over lags 0-40={z:.2f} (<3)", z < 3),
        (f"identical seeds give identical paths: {same}", same),
        (f"CLI reruns byte-identical: {identical}", identical),
    ], time.perf_counter() - t0, 30)


def test_criterion_9_ensemble(levels, mode):
    t0 = time.perf_counter()
    cfg = EnsembleConfig()
    rng = make_rng(9)
    counts = np.array([len(sample_sites(cfg, mode, rng)) for _ in range(1000)])
    lam = cfg.expected_count
    z = abs(counts.mean() - lam) / math.sqrt(lam / 1000)

    sites = sample_sites(replace(cfg, seed=3), mode)
    dist = lifetime_distribution(sites, levels, mode)
    in_range = bool(np.all((dist.taus >= dist.tau_floor * (1 - 1e-12)) & (dist.taus <= BULK_LIFETIME * (1 + 1e-12))))

    grid = np.linspace(-1, 3, 401)
    spectrum = ple_spectrum(sites, grid, levels, mode, cfg)
    peak_at = grid[np.argmax(spectrum.counts)]
    # local maxima in the 171 region and how much of each comes from one ion
    c = spectrum.counts
    peaks = [i for i in range(1, grid.size - 1)
             if grid[i] > 1.0 and c[i] > c[i - 1] and c[i] >= c[i + 1] and c[i] > 0.02 * c.max()]
    shares = [spectrum.dominant_site(i)[1] for i in peaks]
    isolated = sum(s > 0.9 for s in shares)
    report(9, "ion ensemble", [
        (f"mean count {counts.mean():.2f} vs lambda {lam:.2f}: |z|={z:.2f} (<3)", z < 3),
        (f"{len(sites)} lifetimes in [{dist.tau_floor * 1e6:.2f}, 268.8] us: {in_range}", in_range),
        (f"PLE maximum at {peak_at:+.2f} GHz (zero-offset line)", abs(peak_at) < 0.3),
        (f"{isolated} of {len(peaks)} 171 peaks come >90% from one ion (>=1)", isolated >= 1),
    ], time.perf_counter() - t0, 60)
