"""Zero-field level structure of 171Yb:YVO4 and branching bookkeeping.

Default connectivity: A = g1 <-> e0 (dipole along c, cavity enhanced),
C = g0 <-> e0 (dipole along a), and an auxiliary shelving level ``gaux``
collecting the remaining excited-state decay.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

# 4.2 us measured x 64-fold reduction
BULK_LIFETIME = 268.8e-6
REFERENCE_FREQUENCY_GHZ = 304505.0

DEFAULT_LEVELS = ("g0", "g1", "gaux", "e0")
EXCITED_PREFIX = "e"


@dataclass(frozen=True)
class Transition:
    name: str
    lower: str
    upper: str
    dipole_axis: str
    frequency: float  # GHz


@dataclass(frozen=True)
class LevelSystem:
    levels: tuple
    energies: tuple  # MHz offsets, same order as levels
    transitions: tuple
    gamma_bulk: float  # s^-1
    branch_A: float
    branch_C: float
    metadata_levels: tuple = ("e1",)

    @property
    def branch_aux(self):
        return max(0.0, 1.0 - self.branch_A - self.branch_C)

    @property
    def dim(self):
        return len(self.levels)

    def index(self, level):
        return self.levels.index(level)

    def transition(self, name):
        for t in self.transitions:
            if t.name == name:
                return t
        raise KeyError(f"unknown transition {name!r}")

    @property
    def excited(self):
        return tuple(l for l in self.levels if is_excited(l))

    @property
    def ground(self):
        return tuple(l for l in self.levels if not is_excited(l))

    @property
    def bulk_lifetime(self):
        return 1.0 / self.gamma_bulk


def is_excited(level):
    return level.startswith(EXCITED_PREFIX)


def build_level_system(
    gamma_bulk=1.0 / BULK_LIFETIME,
    branch_A=0.404,
    branch_C=0.298,
    branch_aux=None,
    levels=DEFAULT_LEVELS,
    energies=None,
    transitions=None,
    freq_A=REFERENCE_FREQUENCY_GHZ + 1.7,
    freq_C=REFERENCE_FREQUENCY_GHZ + 5.1,
):
    """Build and validate a :class:`LevelSystem`.

    ``branch_aux`` defaults to ``1 - branch_A - branch_C``; when it is given
    explicitly the three fractions must sum to one within 1e-12.
    ``transitions`` may be a sequence of :class:`Transition` or of dicts with
    the same fields; when omitted the default A/C connectivity is used with
    ``freq_A``/``freq_C`` (GHz) as placeholder absolute frequencies.
    """
    levels = tuple(levels)
    if len(set(levels)) != len(levels):
        raise ConfigError("levels.levels", f"duplicate level names in {list(levels)}")
    if not levels:
        raise ConfigError("levels.levels", "no levels given")
    if energies is None:
        energies = (0.0,) * len(levels)
    energies = tuple(float(e) for e in energies)
    if len(energies) != len(levels):
        raise ConfigError("levels.energies", "need one energy per level")

    if not gamma_bulk > 0:
        raise ConfigError("levels.gamma_bulk", f"must be > 0, got {gamma_bulk}")
    for name, b in (("branch_A", branch_A), ("branch_C", branch_C)):
        if not 0.0 <= b <= 1.0:
            raise ConfigError(f"levels.{name}", f"branching fraction {b} outside [0, 1]")
    if branch_aux is None:
        branch_aux = 1.0 - branch_A - branch_C
        if branch_aux < -1e-12:
            raise ConfigError("levels.branch_C", "branch_A + branch_C exceeds 1")
    else:
        if not 0.0 <= branch_aux <= 1.0:
            raise ConfigError("levels.branch_aux", f"branching fraction {branch_aux} outside [0, 1]")
        if abs(branch_A + branch_C + branch_aux - 1.0) > 1e-12:
            raise ConfigError("levels.branch_aux", "branching fractions do not sum to 1")

    if transitions is None:
        transitions = (
            Transition("A", "g1", "e0", "c", float(freq_A)),
            Transition("C", "g0", "e0", "a", float(freq_C)),
        )
    else:
        transitions = tuple(t if isinstance(t, Transition) else Transition(**t) for t in transitions)

    seen = set()
    for t in transitions:
        if t.name in seen:
            raise ConfigError("levels.transitions", f"duplicate transition {t.name}")
        seen.add(t.name)
        for lvl in (t.lower, t.upper):
            if lvl not in levels:
                raise ConfigError("levels.transitions", f"transition {t.name} references unknown level {lvl!r}")
        if is_excited(t.lower) or not is_excited(t.upper):
            raise ConfigError("levels.transitions", f"transition {t.name} must join a ground level to an excited level")
    expected_axis = {"A": "c", "C": "a"}
    for t in transitions:
        if t.name in expected_axis and t.dipole_axis != expected_axis[t.name]:
            raise ConfigError("levels.transitions", f"transition {t.name} must have dipole axis {expected_axis[t.name]}")
    if "A" not in seen:
        raise ConfigError("levels.transitions", "transition A is required")
    if branch_aux > 0 and "gaux" not in levels:
        raise ConfigError("levels.levels", "branch_aux > 0 requires a 'gaux' shelving level")

    return LevelSystem(
        levels=levels,
        energies=energies,
        transitions=transitions,
        gamma_bulk=float(gamma_bulk),
        branch_A=float(branch_A),
        branch_C=float(branch_C),
    )


def branching_from_observables(reduction, cyclicity):
    """Bulk A-branching fraction implied by a lifetime reduction and a cyclicity.

    With total rate G0 (1 + F b) and A-channel rate G0 b (1 + F), eliminating F
    gives b = (cyclicity + 1 - reduction) / (cyclicity + 1).
    """
    if not reduction > 1:
        raise ValueError(f"lifetime reduction must exceed 1, got {reduction}")
    if not cyclicity > 0:
        raise ValueError(f"cyclicity must be positive, got {cyclicity}")
    beta = (cyclicity + 1.0 - reduction) / (cyclicity + 1.0)
    if not 0.0 < beta < 1.0:
        raise ValueError(
            f"inconsistent observables: reduction={reduction}, cyclicity={cyclicity} give branch_A={beta:.4g}"
        )
    return beta


def transition_cyclicity(levels, F_eff):
    """Mean number of A photons before the ion leaves the g1 <-> e0 cycle."""
    if F_eff < 0:
        raise ValueError("F_eff must be >= 0")
    b = levels.branch_A if isinstance(levels, LevelSystem) else float(levels)
    if b >= 1.0:
        raise ValueError("branch_A = 1 gives a fully cyclic transition (infinite cyclicity)")
    return b * (1.0 + F_eff) / (1.0 - b)
