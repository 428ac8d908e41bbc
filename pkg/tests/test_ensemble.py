import math
from dataclasses import replace

import numpy as np
import pytest

from ybcavity.cavity import CavityMode, IonSite, effective_purcell, enhanced_decay
from ybcavity.errors import ConfigError
from ybcavity.ensemble import (
    EnsembleConfig,
    brightness,
    lifetime_distribution,
    lifetime_floor,
    ple_spectrum,
    sample_sites,
)
from ybcavity.levels import BULK_LIFETIME, REFERENCE_FREQUENCY_GHZ
from ybcavity.noise import make_rng


def test_expected_count_scales_with_volume():
    cfg = EnsembleConfig()
    big = replace(cfg, footprint_area=2 * cfg.footprint_area)
    assert big.expected_count == pytest.approx(2 * cfg.expected_count)
    assert cfg.expected_count == pytest.approx(0.14e-6 * 1.25e28 * 1e-12 * 90e-9)


def test_zero_concentration_warns():
    with pytest.warns(RuntimeWarning):
        assert sample_sites(EnsembleConfig(concentration=0.0)) == []


def test_poisson_count_statistics():
    cfg = EnsembleConfig()
    rng = make_rng(11)
    n = np.array([len(sample_sites(cfg, rng=rng)) for _ in range(1000)])
    lam = cfg.expected_count
    assert abs(n.mean() - lam) < 3 * math.sqrt(lam / 1000)
    assert n.var() == pytest.approx(lam, rel=0.2)


def test_sites_in_bounds():
    cfg = EnsembleConfig()
    sites = sample_sites(cfg, rng=make_rng(2))
    assert sites
    for s in sites:
        assert 0 <= s.depth <= cfg.depth_cutoff
        assert math.exp(-2) <= s.transverse_factor <= 1
        assert s.detuning == pytest.approx(REFERENCE_FREQUENCY_GHZ + s.frequency_offset - CavityMode().nu0)


def test_sampling_deterministic():
    cfg = EnsembleConfig(seed=9)
    assert sample_sites(cfg) == sample_sites(cfg)


def test_config_validation():
    with pytest.raises(ConfigError, match="concentration"):
        EnsembleConfig(concentration=-1.0)
    with pytest.raises(ConfigError, match="abundance"):
        EnsembleConfig(abundance_171=0.5, abundance_zero_spin=0.6)


def test_single_ion_peak_at_its_offset(levels, mode):
    site = IonSite(depth=10.0, frequency_offset=1.234)
    grid = np.linspace(1.0, 1.5, 501)
    spectrum = ple_spectrum([site], grid, levels, mode)
    assert grid[np.argmax(spectrum.counts)] == pytest.approx(1.234, abs=1e-3)
    # on resonance a scan point sees shots * brightness; the Lorentzian area is pi * hwhm times that
    cfg = EnsembleConfig()
    b = brightness(site, levels, mode, cfg)
    area = np.sum(spectrum.counts * np.diff(grid).mean())
    assert area == pytest.approx(1000 * b * math.pi * cfg.linewidth / 2, rel=0.02)
    fine = ple_spectrum([site], np.linspace(1.2339, 1.2341, 3), levels, mode)
    assert fine.counts[1] == pytest.approx(1000 * b, rel=1e-3)


def test_ple_zero_offset_dominates(levels, mode):
    cfg = EnsembleConfig(seed=4, footprint_area=5e-12)
    sites = sample_sites(cfg, mode)
    grid = np.linspace(-1, 3, 401)
    spectrum = ple_spectrum(sites, grid, levels, mode, cfg)
    i0 = int(np.argmin(np.abs(grid)))
    assert abs(grid[np.argmax(spectrum.counts)]) < 0.3
    # far from both lines the visible peaks come from a single ion
    tail = np.flatnonzero((grid > 2.3) & (spectrum.counts > 0.05 * spectrum.counts.max()))
    for i in tail:
        assert spectrum.dominant_site(i)[1] > 0.5
    assert spectrum.dominant_site(i0)[1] < 1.0
    assert all(s.isotope != "other" for s in spectrum.sites)


def test_brightness_increases_with_purcell(levels, mode):
    cfg = EnsembleConfig()
    depths = [0, 20, 40, 60, 90]
    b = [brightness(IonSite(depth=d), levels, mode, cfg) for d in depths]
    assert np.all(np.diff(b) < 0)
    F = [effective_purcell(IonSite(depth=d), mode) for d in (0, 90)]
    assert F[0] / F[1] == pytest.approx(8.0)


def test_lifetimes_bounded(levels, mode):
    sites = sample_sites(EnsembleConfig(seed=1, footprint_area=5e-12), mode)
    dist = lifetime_distribution(sites, levels, mode)
    st = dist.stats
    assert st["min"] >= dist.tau_floor * (1 - 1e-12)
    assert st["max"] <= BULK_LIFETIME * (1 + 1e-12)
    assert dist.counts.sum() == len(sites)


def test_lifetime_limits(levels, mode):
    bulk = [IonSite(transverse_factor=0.0)] * 5
    dist = lifetime_distribution(bulk, levels, mode)
    assert dist.stats["max"] == pytest.approx(268.8e-6)
    surface = [IonSite(depth=0.0)] * 7
    dist = lifetime_distribution(surface, levels, mode)
    assert len(dist.counts) == 1 and dist.counts[0] == 7
    assert dist.stats["min"] == pytest.approx(lifetime_floor(levels, mode))
    assert lifetime_floor(levels, mode) == pytest.approx(enhanced_decay(levels, IonSite(), mode).tau)


def test_empty_distribution_raises(levels, mode):
    with pytest.raises(ValueError):
        lifetime_distribution([], levels, mode)
