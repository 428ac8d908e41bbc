import pytest
from hypothesis import given
from hypothesis import strategies as st

from ybcavity.errors import ConfigError
from ybcavity.levels import (
    BULK_LIFETIME,
    branching_from_observables,
    build_level_system,
    transition_cyclicity,
)


def test_default_connectivity(levels):
    A, C = levels.transition("A"), levels.transition("C")
    assert (A.lower, A.upper, A.dipole_axis) == ("g1", "e0", "c")
    assert (C.lower, C.upper, C.dipole_axis) == ("g0", "e0", "a")
    assert levels.excited == ("e0",)
    assert "e1" in levels.metadata_levels
    assert levels.bulk_lifetime == pytest.approx(BULK_LIFETIME)


def test_aux_branch_is_remainder(levels):
    assert levels.branch_aux == pytest.approx(1 - 0.404 - 0.298)


def test_bulk_lifetime_is_measured_times_reduction():
    assert BULK_LIFETIME == pytest.approx(4.2e-6 * 64)


@pytest.mark.parametrize(
    "kwargs, field",
    [
        ({"branch_A": 1.2}, "levels.branch_A"),
        ({"branch_A": 0.6, "branch_C": 0.6}, "levels.branch_C"),
        ({"branch_aux": 0.5}, "levels.branch_aux"),
        ({"gamma_bulk": 0.0}, "levels.gamma_bulk"),
        ({"levels": ("g0", "g0", "e0")}, "levels.levels"),
    ],
)
def test_invalid_level_systems(kwargs, field):
    with pytest.raises(ConfigError) as exc:
        build_level_system(**kwargs)
    assert exc.value.field == field


def test_transition_axes_enforced():
    bad = [{"name": "A", "lower": "g1", "upper": "e0", "dipole_axis": "a", "frequency": 1.0}]
    with pytest.raises(ConfigError, match="dipole axis"):
        build_level_system(transitions=bad)


def test_unknown_transition(levels):
    with pytest.raises(KeyError):
        levels.transition("B")


def test_branching_from_observables_values():
    assert branching_from_observables(6.556, 10) == pytest.approx(0.404, abs=1e-3)
    assert branching_from_observables(3.0, 4.0) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        branching_from_observables(20.0, 10.0)
    with pytest.raises(ValueError):
        branching_from_observables(0.5, 10.0)


def test_cyclicity_at_41us_point(levels):
    F = (BULK_LIFETIME / 41e-6 - 1) / levels.branch_A
    assert transition_cyclicity(levels, F) == pytest.approx(10.0, abs=0.1)
    assert transition_cyclicity(levels, 0.0) == pytest.approx(0.404 / 0.596)


def test_cyclicity_rejects_closed_cycle():
    with pytest.raises(ValueError):
        transition_cyclicity(1.0, 5.0)


@given(
    beta=st.floats(0.05, 0.95),
    F=st.floats(0.1, 500.0),
)
def test_branching_round_trip(beta, F):
    reduction = 1 + F * beta
    cyc = transition_cyclicity(beta, F)
    assert branching_from_observables(reduction, cyc) == pytest.approx(beta, rel=1e-9)
