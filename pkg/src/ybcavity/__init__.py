"""Simulation toolkit for a single 171Yb:YVO4 ion coupled to a nanophotonic cavity."""

__version__ = "0.1.0"

from .cavity import CavityMode, DecayRates, IonSite, enhanced_decay, purcell_peak
from .config import RunConfig, config_from_dict, parse_config
from .errors import ConfigError, FitError, InsufficientStatistics, NumericalError, SolverError
from .levels import LevelSystem, branching_from_observables, build_level_system, transition_cyclicity
from .noise import NoiseModel
from .photons import DetectionChain
from .protocols import ProtocolConfig, System

__all__ = [
    "CavityMode",
    "ConfigError",
    "DecayRates",
    "DetectionChain",
    "FitError",
    "InsufficientStatistics",
    "IonSite",
    "LevelSystem",
    "NoiseModel",
    "NumericalError",
    "ProtocolConfig",
    "RunConfig",
    "SolverError",
    "System",
    "branching_from_observables",
    "build_level_system",
    "config_from_dict",
    "enhanced_decay",
    "parse_config",
    "purcell_peak",
    "transition_cyclicity",
]
