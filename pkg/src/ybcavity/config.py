"""JSON run configuration: schema, defaults with provenance, and model builders.

A config file is one JSON object with the blocks ``levels``, ``cavity``,
``bragg``, ``site``, ``noise``, ``chain``, ``ensemble`` and ``protocol`` plus
``master_seed``.  Every block is optional.  Unknown keys are rejected, missing
keys take defaults, and each value is logged in an audit list with its
source (``config``, ``default`` or ``resolved``) and, for defaults, whether it
is a measured value (``measured``), computed from measured values (``computed``)
or a stand-in with no measured counterpart (``placeholder``).
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bragg import quarter_wave_cell
from .cavity import CavityMode, IonSite, depth_for_purcell, enhanced_decay
from .ensemble import EnsembleConfig
from .errors import ConfigError
from .levels import BULK_LIFETIME, REFERENCE_FREQUENCY_GHZ, build_level_system
from .noise import NoiseModel
from .photons import DetectionChain
from .protocols import ProtocolConfig, System, quasi_static_guess

TWO_PI = 2 * math.pi
PAPER_SCALE_SHOTS = 500_000

# lifetime reductions that define the named sites
SITE_PRESETS = {
    "strong": 64.0,  # 268.8 us -> 4.2 us
    "orange": BULK_LIFETIME / 41e-6,  # 268.8 us -> 41 us
    "bulk": 1.0,
}


def _grid(start, stop, num):
    return {"start": start, "stop": stop, "num": num}


# block -> field -> (default, provenance, kind)
SCHEMA = {
    "levels": {
        "bulk_lifetime": (BULK_LIFETIME, "computed", "float"),
        "branch_A": (0.404, "computed", "float"),
        "branch_C": (0.298, "placeholder", "float"),
        "branch_aux": (None, "computed", "float?"),
        "freq_A_offset": (1.7, "placeholder", "float"),
        "freq_C_offset": (5.1, "placeholder", "float"),
    },
    "cavity": {
        "nu0": (REFERENCE_FREQUENCY_GHZ, "measured", "float"),
        "Q": (5300.0, "measured", "float"),
        "V_norm": (1.7, "measured", "float"),
        "n_host": (2.17, "placeholder", "float"),
        "field_halving_depth": (30.0, "measured", "float"),
        "interface_fraction": (0.4, "measured", "float"),
        "coupling_ratio": (0.5, "placeholder", "float"),
    },
    "bragg": {
        "n_high": (3.48, "placeholder", "float"),
        "n_low": (2.0, "placeholder", "float"),
        "wavelength": (984.5, "measured", "float"),
        "n_left": (12, "computed", "int"),
        "n_right": (23, "computed", "int"),
        "n_periods": (44, "measured", "int"),
        "n_taper": (20, "measured", "int"),
        "slab_thickness": (200.0, "measured", "float"),
    },
    "site": {
        "preset": ("strong", "measured", "str"),
        "depth": (None, "computed", "float?"),
        "transverse_factor": (None, "computed", "float?"),
        "dipole_alignment": (1.0, "placeholder", "float"),
        "detuning": (0.0, "measured", "float"),
    },
    "noise": {
        "sigma": (None, "computed", "float?"),
        "gamma_phi": (None, "computed", "float?"),
        "tau_c": (1e-3, "measured", "float"),
        "T2_star_target": (69e-9, "measured", "float"),
        "T2_target": (330e-9, "measured", "float"),
    },
    "chain": {
        "grating_efficiency": (0.25, "measured", "float"),
        "splitter_fraction": (0.99, "measured", "float"),
        "detector_efficiency": (0.8, "placeholder", "float"),
        "extra_loss": (0.0, "placeholder", "float"),
        "background_rate": (0.0, "placeholder", "float"),
        "dark_count_rate": (0.0, "placeholder", "float"),
        "dead_time": (50e-9, "placeholder", "float"),
    },
    "ensemble": {
        "concentration": (0.14e-6, "measured", "float"),
        "cation_density": (1.25e28, "placeholder", "float"),
        "footprint_area": (1e-12, "placeholder", "float"),
        "depth_cutoff": (90.0, "placeholder", "float"),
        "abundance_171": (0.143, "placeholder", "float"),
        "abundance_zero_spin": (0.696, "placeholder", "float"),
        "inhomogeneous_fwhm": (0.3, "placeholder", "float"),
        "line_offset_171": (1.7, "placeholder", "float"),
        "linewidth": (4.6e-3, "computed", "float"),
        "readable_fraction_171": (1.0 / 3.0, "placeholder", "float"),
        "collection_window": (20e-6, "measured", "float"),
        "seed": (None, "computed", "int?"),
        "ple_grid": (_grid(-1.0, 3.0, 401), "placeholder", "grid"),
        "lifetime_bins": (30, "placeholder", "int"),
    },
    "protocol": {
        "shots": (2000, "placeholder", "int"),
        "paper_scale": (False, "placeholder", "bool"),
        "readout_pulses": (50, "measured", "int"),
        "repetition_period": (20e-6, "measured", "float"),
        "noise_samples": (40, "placeholder", "int"),
        "stratified_noise": (True, "placeholder", "bool"),
        "workers": (1, "placeholder", "int"),
        "shot_noise": (False, "placeholder", "bool"),
        "ground_prior": ({"g0": 1 / 3, "g1": 1 / 3, "gaux": 1 / 3}, "placeholder", "dict"),
        "pump_rabi": (TWO_PI * 5e6, "placeholder", "float"),
        "init_tol": (1e-10, "placeholder", "float"),
        "init_max_cycles": (100000, "placeholder", "int"),
        "lifetime_rabi": (TWO_PI * 50e6, "placeholder", "float"),
        "lifetime_bins": (100, "placeholder", "int"),
        "lifetime_span": (5.0, "placeholder", "float"),
        "pump_pulses": (50, "placeholder", "int"),
        "probe_rabi": (TWO_PI * 50e6, "placeholder", "float"),
        "rabi_rate": (TWO_PI * 10e6, "placeholder", "float"),
        "coherence_rabi": (TWO_PI * 100e6, "placeholder", "float"),
        "ramsey_detuning": (TWO_PI * 10e6, "placeholder", "float"),
        "coherence_readout": (10e-6, "placeholder", "float"),
        "ramsey_model": ("stretched", "placeholder", "str"),
        "echo_model": ("exponential", "placeholder", "str"),
        "tol": (1e-9, "placeholder", "float"),
        "pump_offsets_MHz": (_grid(-20.0, 20.0, 41), "placeholder", "grid"),
        "rabi_durations": (_grid(0.0, 200e-9, 21), "placeholder", "grid"),
        "ramsey_delays": (_grid(0.0, 207e-9, 25), "computed", "grid"),
        "echo_delays": (_grid(0.0, 990e-9, 25), "computed", "grid"),
        "reflection_offsets_GHz": (_grid(-200.0, 200.0, 801), "placeholder", "grid"),
        "bragg_grid_nm": (_grid(800.0, 1200.0, 801), "placeholder", "grid"),
        "g2_emitters": (1, "placeholder", "int"),
        "g2_rabi": (TWO_PI * 50e6, "placeholder", "float"),
        "g2_background_ratio": (0.0, "placeholder", "float"),
        "g2_max_lag": (500, "placeholder", "int"),
        "g2_far_lag_min": (250, "placeholder", "int"),
        "g2_near_window": (0.5e-3, "measured", "float"),
        "calibration_samples": (200, "placeholder", "int"),
        "calibration_max_iter": (8, "placeholder", "int"),
    },
}

PROTOCOL_CONFIG_FIELDS = tuple(ProtocolConfig.__dataclass_fields__)


def _check_kind(path, value, kind):
    optional = kind.endswith("?")
    base = kind.rstrip("?")
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "must not be null")
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if base == "dict":
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return {str(k): _check_kind(f"{path}.{k}", v, "float") for k, v in value.items()}
    if base == "grid":
        return _check_grid(path, value)
    raise AssertionError(kind)


def _check_grid(path, value):
    if isinstance(value, list):
        if not value:
            raise ConfigError(path, "grid is empty")
        return [_check_kind(path, v, "float") for v in value]
    if isinstance(value, dict):
        if set(value) != {"start", "stop", "num"}:
            raise ConfigError(path, "grid object needs exactly start, stop, num")
        num = _check_kind(path + ".num", value["num"], "int")
        if num < 1:
            raise ConfigError(path + ".num", "must be >= 1")
        return {
            "start": _check_kind(path + ".start", value["start"], "float"),
            "stop": _check_kind(path + ".stop", value["stop"], "float"),
            "num": num,
        }
    raise ConfigError(path, "grid must be a list of numbers or {start, stop, num}")


def grid_values(value):
    if isinstance(value, dict):
        return np.linspace(value["start"], value["stop"], value["num"])
    return np.asarray(value, dtype=float)


@dataclass(frozen=True)
class RunConfig:
    master_seed: int
    blocks: dict
    audit: list = field(default_factory=list, compare=False)

    def __getitem__(self, block):
        return self.blocks[block]

    def to_dict(self):
        out = {"master_seed": self.master_seed}
        out.update(copy.deepcopy(self.blocks))
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # -- model objects --

    def level_system(self):
        b = self.blocks["levels"]
        return build_level_system(
            gamma_bulk=1.0 / b["bulk_lifetime"],
            branch_A=b["branch_A"],
            branch_C=b["branch_C"],
            branch_aux=b["branch_aux"],
            freq_A=REFERENCE_FREQUENCY_GHZ + b["freq_A_offset"],
            freq_C=REFERENCE_FREQUENCY_GHZ + b["freq_C_offset"],
        )

    def mode(self):
        b = self.blocks["cavity"]
        return CavityMode(**{k: b[k] for k in CavityMode.__dataclass_fields__})

    def site(self):
        b = self.blocks["site"]
        return IonSite(
            depth=b["depth"],
            transverse_factor=b["transverse_factor"],
            dipole_alignment=b["dipole_alignment"],
            detuning=b["detuning"],
        )

    def noise(self):
        b = self.blocks["noise"]
        return NoiseModel(sigma=b["sigma"], tau_c=b["tau_c"], gamma_phi=b["gamma_phi"])

    def chain(self):
        return DetectionChain(**self.blocks["chain"])

    def ensemble(self):
        b = dict(self.blocks["ensemble"])
        fields_ = EnsembleConfig.__dataclass_fields__
        return EnsembleConfig(**{k: v for k, v in b.items() if k in fields_})

    def protocol(self):
        b = self.blocks["protocol"]
        return ProtocolConfig(**{k: b[k] for k in PROTOCOL_CONFIG_FIELDS})

    def bragg_cell(self):
        b = self.blocks["bragg"]
        return quarter_wave_cell(
            b["n_high"], b["n_low"], b["wavelength"],
            n_periods=b["n_periods"], n_taper=b["n_taper"], n_left=b["n_left"], n_right=b["n_right"],
            slab_thickness=b["slab_thickness"],
        )

    def system(self):
        return System(self.level_system(), self.mode(), self.site(), self.noise(), self.chain(), self.protocol())

    def grid(self, block, name):
        return grid_values(self.blocks[block][name])


def _check_seed(seed):
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("master_seed", f"must be an integer in [0, 2^64), got {seed!r}")


def _fill_block(name, given, audit):
    if not isinstance(given, dict):
        raise ConfigError(name, "block must be a JSON object")
    schema = SCHEMA[name]
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", "unknown key")
    block = {}
    for key, (default, provenance, kind) in schema.items():
        path = f"{name}.{key}"
        if key in given:
            block[key] = _check_kind(path, given[key], kind)
            audit.append({"field": path, "source": "config"})
        else:
            block[key] = copy.deepcopy(default)
            audit.append({"field": path, "source": "default", "provenance": provenance})
    return block


def _resolve(blocks, master_seed, audit):
    """Fill derived values that depend on other blocks, then validate everything."""
    def note(path, value):
        for entry in audit:
            if entry["field"] == path and entry["source"] == "default":
                entry["source"] = "resolved"
                entry["value"] = value

    levels_b = blocks["levels"]
    try:
        levels = build_level_system(
            gamma_bulk=1.0 / levels_b["bulk_lifetime"] if levels_b["bulk_lifetime"] > 0 else -1.0,
            branch_A=levels_b["branch_A"],
            branch_C=levels_b["branch_C"],
            branch_aux=levels_b["branch_aux"],
        )
    except ConfigError as exc:
        if exc.field == "levels.gamma_bulk":
            raise ConfigError("levels.bulk_lifetime", "must be > 0") from exc
        raise
    if not 0 < levels.branch_A < 1:
        raise ConfigError("levels.branch_A", f"must lie in (0, 1), got {levels.branch_A}")
    c = blocks["cavity"]
    mode = CavityMode(**{k: c[k] for k in CavityMode.__dataclass_fields__})
    if not 0 <= c["coupling_ratio"] <= 1:
        raise ConfigError("cavity.coupling_ratio", "must lie in [0, 1]")

    s = blocks["site"]
    preset = s["preset"]
    if preset not in SITE_PRESETS and preset != "custom":
        raise ConfigError("site.preset", f"must be one of {sorted(SITE_PRESETS) + ['custom']}, got {preset!r}")
    if preset == "custom":
        if s["depth"] is None:
            s["depth"] = 0.0
            note("site.depth", 0.0)
        if s["transverse_factor"] is None:
            s["transverse_factor"] = 1.0
            note("site.transverse_factor", 1.0)
    else:
        reduction = SITE_PRESETS[preset]
        if s["transverse_factor"] is None:
            s["transverse_factor"] = 0.0 if preset == "bulk" else 1.0
            note("site.transverse_factor", s["transverse_factor"])
        if s["depth"] is None:
            if preset == "bulk":
                depth = 0.0
            else:
                F = (reduction - 1.0) / levels.branch_A
                try:
                    depth = depth_for_purcell(F, mode, s["transverse_factor"], s["dipole_alignment"], s["detuning"])
                except ValueError as exc:
                    raise ConfigError("site.preset", str(exc)) from exc
            s["depth"] = depth
            note("site.depth", depth)
    site = IonSite(depth=s["depth"], transverse_factor=s["transverse_factor"],
                   dipole_alignment=s["dipole_alignment"], detuning=s["detuning"])

    n = blocks["noise"]
    if n["sigma"] is None or n["gamma_phi"] is None:
        if not (n["T2_star_target"] > 0 and n["T2_target"] >= n["T2_star_target"]):
            raise ConfigError("noise.T2_target", "targets need 0 < T2* <= T2")
        guess = quasi_static_guess(n["T2_star_target"], n["T2_target"], enhanced_decay(levels, site, mode).gamma_total, n["tau_c"])
        if n["sigma"] is None:
            n["sigma"] = guess.sigma
            note("noise.sigma", guess.sigma)
        if n["gamma_phi"] is None:
            n["gamma_phi"] = guess.gamma_phi
            note("noise.gamma_phi", guess.gamma_phi)
    NoiseModel(sigma=n["sigma"], tau_c=n["tau_c"], gamma_phi=n["gamma_phi"])

    DetectionChain(**blocks["chain"])

    e = blocks["ensemble"]
    if e["seed"] is None:
        e["seed"] = master_seed
        note("ensemble.seed", master_seed)
    if e["lifetime_bins"] < 1:
        raise ConfigError("ensemble.lifetime_bins", "must be >= 1")
    EnsembleConfig(**{k: v for k, v in e.items() if k in EnsembleConfig.__dataclass_fields__})

    p = blocks["protocol"]
    if p["paper_scale"]:
        p["shots"] = PAPER_SCALE_SHOTS
        p["paper_scale"] = False
        note("protocol.shots", PAPER_SCALE_SHOTS)
    for k in ("ramsey_model", "echo_model"):
        if p[k] not in ("gaussian", "exponential", "stretched"):
            raise ConfigError(f"protocol.{k}", f"unknown envelope {p[k]!r}")
    if not 1e-12 < p["tol"] < 1e-3:
        raise ConfigError("protocol.tol", "must lie in (1e-12, 1e-3)")
    if p["g2_emitters"] < 1:
        raise ConfigError("protocol.g2_emitters", "must be >= 1")
    if p["g2_background_ratio"] < 0:
        raise ConfigError("protocol.g2_background_ratio", "must be >= 0")
    if p["g2_max_lag"] < p["g2_far_lag_min"] or p["g2_far_lag_min"] < 1:
        raise ConfigError("protocol.g2_max_lag", "must be >= g2_far_lag_min >= 1")
    if p["workers"] < 1:
        raise ConfigError("protocol.workers", "must be >= 1")
    unknown = set(p["ground_prior"]) - set(levels.ground)
    if unknown:
        raise ConfigError("protocol.ground_prior", f"unknown ground levels {sorted(unknown)}")
    if any(v < 0 for v in p["ground_prior"].values()) or sum(p["ground_prior"].values()) <= 0:
        raise ConfigError("protocol.ground_prior", "weights must be >= 0 with a positive sum")
    try:
        ProtocolConfig(**{k: p[k] for k in PROTOCOL_CONFIG_FIELDS})
    except ValueError as exc:
        raise ConfigError("protocol", str(exc)) from exc

    b = blocks["bragg"]
    for k in ("n_high", "n_low"):
        if b[k] < 1:
            raise ConfigError(f"bragg.{k}", "index must be >= 1")
    if not b["wavelength"] > 0:
        raise ConfigError("bragg.wavelength", "must be > 0")
    if b["n_left"] < 1 or b["n_right"] < 1:
        raise ConfigError("bragg.n_left", "each mirror needs at least one period")


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    unknown = sorted(set(data) - set(SCHEMA) - {"master_seed"})
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    audit = []
    if "master_seed" in data:
        seed = data["master_seed"]
        audit.append({"field": "master_seed", "source": "config"})
    else:
        seed = 0
        audit.append({"field": "master_seed", "source": "default", "provenance": "placeholder"})
    _check_seed(seed)
    blocks = {name: _fill_block(name, data.get(name, {}), audit) for name in SCHEMA}
    _resolve(blocks, seed, audit)
    return RunConfig(seed, blocks, audit)


def load_config_data(path):
    """Raw JSON object of a config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return data


def parse_config(path):
    """Load, validate and resolve a JSON config file."""
    return config_from_dict(load_config_data(path))
