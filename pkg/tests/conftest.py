import pytest

from ybcavity.cavity import CavityMode, IonSite, depth_for_purcell
from ybcavity.levels import BULK_LIFETIME, build_level_system
from ybcavity.protocols import System


@pytest.fixture(scope="session")
def levels():
    return build_level_system()


@pytest.fixture(scope="session")
def mode():
    return CavityMode()


def site_with_product(product, levels, mode):
    """Site whose F_eff * branch_A equals ``product``."""
    return IonSite(depth=depth_for_purcell(product / levels.branch_A, mode))


@pytest.fixture(scope="session")
def strong_site(levels, mode):
    return site_with_product(63.0, levels, mode)


@pytest.fixture(scope="session")
def orange_site(levels, mode):
    return site_with_product(BULK_LIFETIME / 41e-6 - 1.0, levels, mode)


@pytest.fixture(scope="session")
def strong_system(levels, mode, strong_site):
    return System(levels=levels, mode=mode, site=strong_site)


@pytest.fixture(scope="session")
def orange_system(levels, mode, orange_site):
    return System(levels=levels, mode=mode, site=orange_site)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
