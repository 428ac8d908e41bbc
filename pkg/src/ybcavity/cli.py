"""Command-line entry point: ``ybcavity <subcommand> --config FILE [--seed N] [--shots N] [--out DIR]``.

Every run writes ``<subcommand>.csv``, ``<subcommand>.json`` (summary) and
``resolved_config.json`` into the output directory.  Exit status is 0 on
success, 2 for configuration errors and 3 for numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bragg import mirror_transmission, q_estimate, stack_bandgap, transmission_scan
from .cavity import (
    IonSite,
    effective_purcell,
    enhanced_decay,
    fit_reflection_q,
    purcell_peak,
    reflection_spectrum,
)
from .config import PAPER_SCALE_SHOTS, config_from_dict, load_config_data
from .ensemble import lifetime_distribution, ple_spectrum, sample_sites
from .errors import ConfigError, NumericalError
from .levels import transition_cyclicity
from .lindblad import Drive, PulseSequence, ReadoutWindow, evolve, mixed_state
from .noise import NoiseModel
from .photons import Emitter, bunching_ratio, g2_pulsed, simulate_record
from .protocols import (
    calibrate_noise,
    run_echo,
    run_lifetime,
    run_pump_probe,
    run_rabi,
    run_ramsey,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_csv(path, columns):
    names = list(columns)
    data = [np.asarray(columns[n]).ravel() for n in names]
    n = {d.size for d in data}
    if len(n) != 1:
        raise ValueError("CSV columns differ in length")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*data):
            w.writerow([_fmt(v) for v in row])


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def inputs_hash(subcommand, config):
    payload = json.dumps({"subcommand": subcommand, "config": config.to_dict()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


# -- subcommands -------------------------------------------------------------
# each returns (columns, fit, derived)

def _protocol_output(res):
    fit = res.fit.as_dict() if res.fit is not None else None
    return res.columns(), fit, res.summary


def cmd_lifetime(cfg):
    return _protocol_output(run_lifetime(cfg.system(), seed=cfg.master_seed))


def cmd_pump_probe(cfg):
    res = run_pump_probe(cfg.system(), cfg.grid("protocol", "pump_offsets_MHz"), seed=cfg.master_seed)
    return _protocol_output(res)


def cmd_rabi(cfg):
    return _protocol_output(run_rabi(cfg.system(), cfg.grid("protocol", "rabi_durations"), seed=cfg.master_seed))


def cmd_ramsey(cfg):
    return _protocol_output(run_ramsey(cfg.system(), cfg.grid("protocol", "ramsey_delays"), seed=cfg.master_seed))


def cmd_echo(cfg):
    return _protocol_output(run_echo(cfg.system(), cfg.grid("protocol", "echo_delays"), seed=cfg.master_seed))


def _g2_sequence(p, rabi):
    t_pi = math.pi / rabi
    period = p["repetition_period"]
    if t_pi >= period:
        raise ConfigError("protocol.g2_rabi", "pi pulse longer than the repetition period")
    return PulseSequence((Drive("A", rabi, t_pi), ReadoutWindow(period - t_pi)), period=period)


def g2_background_rate(system, sequence, ratio):
    """Background rate (counts/s in readout windows) giving ``ratio`` background per signal count."""
    if ratio == 0:
        return 0.0
    rho0 = mixed_state(system.levels, {system.levels.transition("A").lower: 1.0})
    res = evolve(rho0, sequence, system.levels, system.rates, NoiseModel())
    signal = system.chain.efficiency * res.total_emission
    window = sum(s.duration for s in sequence.segments if isinstance(s, ReadoutWindow))
    return ratio * signal / window


def cmd_g2(cfg):
    p = cfg["protocol"]
    system = cfg.system()
    seq = _g2_sequence(p, p["g2_rabi"])
    bg = g2_background_rate(system, seq, p["g2_background_ratio"])
    chain = system.chain
    if bg > 0:
        chain = replace(chain, background_rate=chain.background_rate + bg)
    emitters = [Emitter(system.levels, system.rates, system.noise) for _ in range(p["g2_emitters"])]
    record = simulate_record(
        emitters, seq, chain, p["shots"], cfg.master_seed, period=p["repetition_period"], workers=p["workers"]
    )
    hist = g2_pulsed(record, max_lag=p["g2_max_lag"], far_lag_min=p["g2_far_lag_min"])
    try:
        ratio = bunching_ratio(hist, p["g2_near_window"])
    except NumericalError:
        ratio = float("nan")
    cols = {"lag_s": hist.peak_lags * hist.period, "g2": hist.peak_g2, "g2_err": hist.peak_err}
    derived = {
        "g2_zero": hist.g2_zero,
        "err": hist.g2_zero_err,
        "bunching_ratio": ratio,
        "near_window_s": p["g2_near_window"],
        "detections": len(record),
        "background_rate": chain.uncorrelated_rate,
        "emitters": p["g2_emitters"],
    }
    return cols, None, derived


def cmd_ple(cfg):
    ens = cfg.ensemble()
    e = cfg["ensemble"]
    levels, mode, chain = cfg.level_system(), cfg.mode(), cfg.chain()
    sites = sample_sites(ens, mode)
    grid = cfg.grid("ensemble", "ple_grid")
    spectrum = ple_spectrum(sites, grid, levels, mode, ens, shots=cfg["protocol"]["shots"], efficiency=chain.efficiency)
    i = int(np.argmax(spectrum.counts)) if spectrum.counts.size else 0
    derived = {
        "expected_ions": ens.expected_count,
        "ions": len(sites),
        "ions_171": sum(s.isotope == "171" for s in sites),
        "ions_zero_spin": sum(s.isotope == "zero-spin" for s in sites),
        "peak_offset_GHz": float(grid[i]),
        "peak_counts": float(spectrum.counts[i]) if spectrum.counts.size else 0.0,
        "ensemble_seed": e["seed"],
    }
    return {"offset_GHz": grid, "counts": spectrum.counts}, None, derived


def cmd_lifetimes(cfg):
    ens = cfg.ensemble()
    levels, mode = cfg.level_system(), cfg.mode()
    sites = sample_sites(ens, mode)
    if not sites:
        raise NumericalError("no ions drawn for this seed and volume", module="ensemble")
    dist = lifetime_distribution(sites, levels, mode, bins=cfg["ensemble"]["lifetime_bins"])
    cols = {"tau_low_s": dist.edges[:-1], "tau_high_s": dist.edges[1:], "count": dist.counts}
    return cols, None, dist.stats


def cmd_purcell(cfg):
    levels, mode, site = cfg.level_system(), cfg.mode(), cfg.site()
    rates = enhanced_decay(levels, site, mode)
    F_max = purcell_peak(mode.Q, mode.V_norm)
    depths = np.linspace(0.0, 150.0, 151)
    F = np.array([effective_purcell(IonSite(depth=d, transverse_factor=site.transverse_factor,
                                            dipole_alignment=site.dipole_alignment, detuning=site.detuning), mode)
                  for d in depths])
    tau = levels.bulk_lifetime / (1.0 + F * levels.branch_A)
    derived = {
        "F_max": F_max,
        "F_eff": rates.F_eff,
        "F_eff_branch_A": rates.F_eff * levels.branch_A,
        "tau": rates.tau,
        "lifetime_reduction": levels.bulk_lifetime * rates.gamma_total,
        "cyclicity": transition_cyclicity(levels, rates.F_eff),
        "channels": rates.channels,
        "depth_nm": site.depth,
        "tau_min": levels.bulk_lifetime / (1.0 + F_max * levels.branch_A),
    }
    return {"depth_nm": depths, "F_eff": F, "tau_s": tau}, None, derived


def cmd_reflection(cfg):
    mode = cfg.mode()
    nu = mode.nu0 + cfg.grid("protocol", "reflection_offsets_GHz")
    spectrum = reflection_spectrum(mode, cfg["cavity"]["coupling_ratio"], nu)
    Q, Q_err, params = fit_reflection_q(spectrum)
    derived = {"Q_fit": Q, "Q_err": Q_err, "Q_set": mode.Q, "linewidth_GHz": mode.linewidth}
    return {"frequency_GHz": spectrum[:, 0], "reflectance": spectrum[:, 1]}, params, derived


def cmd_bragg(cfg):
    b = cfg["bragg"]
    cell = cfg.bragg_cell()
    grid = cfg.grid("protocol", "bragg_grid_nm")
    rows = np.array(transmission_scan(cell, b["n_left"], grid))
    gaps = stack_bandgap(cell, grid)
    lam = b["wavelength"]
    derived = {
        "gaps_nm": [list(g) for g in gaps],
        "design_in_gap": any(lo <= lam <= hi for lo, hi in gaps),
        "T_left": mirror_transmission(cell, b["n_left"], lam),
        "T_right": mirror_transmission(cell, b["n_right"], lam),
        "Q_estimate": q_estimate(cell, b["n_left"], b["n_right"], lam) if any(lo <= lam <= hi for lo, hi in gaps) else None,
        "design_wavelength_nm": lam,
    }
    cols = {"wavelength": rows[:, 0], "transmission": rows[:, 1], "in_gap": rows[:, 2].astype(int)}
    return cols, None, derived


def cmd_calibrate(cfg):
    n = cfg["noise"]
    p = cfg["protocol"]
    cal = calibrate_noise(
        cfg.system(), T2_star=n["T2_star_target"], T2=n["T2_target"], tau_c=n["tau_c"],
        n_samples=p["calibration_samples"], seed=cfg.master_seed, max_iter=p["calibration_max_iter"],
    )
    h = cal.history
    cols = {
        "iteration": np.arange(1, len(h) + 1),
        "sigma": [r["sigma"] for r in h],
        "gamma_phi": [r["gamma_phi"] for r in h],
        "T2_star": [r["T2_star"] for r in h],
        "T2": [r["T2"] for r in h],
    }
    derived = {
        "sigma": cal.noise.sigma,
        "sigma_over_2pi_MHz": cal.noise.sigma / (2 * math.pi) / 1e6,
        "gamma_phi": cal.noise.gamma_phi,
        "tau_c": cal.noise.tau_c,
        "T2_star": cal.T2_star,
        "T2": cal.T2,
        "effective_linewidth_MHz": 1.0 / (math.pi * cal.T2_star) / 1e6,
        "iterations": cal.iterations,
    }
    return cols, None, derived


COMMANDS = {
    "lifetime": cmd_lifetime,
    "pump-probe": cmd_pump_probe,
    "rabi": cmd_rabi,
    "ramsey": cmd_ramsey,
    "echo": cmd_echo,
    "g2": cmd_g2,
    "ple": cmd_ple,
    "lifetimes": cmd_lifetimes,
    "purcell": cmd_purcell,
    "reflection": cmd_reflection,
    "bragg": cmd_bragg,
    "calibrate": cmd_calibrate,
}


def execute(subcommand, cfg, out_dir):
    """Run one subcommand and write its artifacts; returns the summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns, fit, derived = COMMANDS[subcommand](cfg)
    summary = {
        "subcommand": subcommand,
        "version": __version__,
        "inputs_hash": inputs_hash(subcommand, cfg),
        "master_seed": cfg.master_seed,
        "shots": cfg["protocol"]["shots"],
        "fit": fit,
        "derived": derived,
        "audit": cfg.audit,
    }
    write_csv(out / f"{subcommand}.csv", columns)
    write_json(out / f"{subcommand}.json", summary)
    (out / "resolved_config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    return summary


def build_parser():
    parser = argparse.ArgumentParser(prog="ybcavity", description="Simulate a cavity-coupled Yb:YVO4 ion.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, help="override master_seed")
        shots = sp.add_mutually_exclusive_group()
        shots.add_argument("--shots", type=int, help="override protocol.shots")
        shots.add_argument("--paper-scale", action="store_true", help=f"use {PAPER_SCALE_SHOTS} shots")
        sp.add_argument("--out", default=".", help="output directory (default: current)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        data = load_config_data(args.config)
        if not isinstance(data, dict):
            raise ConfigError("", "config must be a JSON object")
        if args.seed is not None:
            data["master_seed"] = args.seed
        if args.shots is not None or args.paper_scale:
            protocol = data.setdefault("protocol", {})
            if not isinstance(protocol, dict):
                raise ConfigError("protocol", "block must be a JSON object")
            protocol["shots"] = PAPER_SCALE_SHOTS if args.paper_scale else args.shots
            protocol["paper_scale"] = False
        cfg = config_from_dict(data)
        summary = execute(args.subcommand, cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps(_clean(summary["derived"]), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
