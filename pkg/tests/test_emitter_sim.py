import math

import numpy as np
import pytest
from scipy import stats

from photostat.core import PS_PER_S
from photostat.emitter_sim import (
    DetectionConfig,
    EmitterEnsemble,
    ExcitationConfig,
    MoleculePhotophysics,
    SimulationReport,
    cw_scattering_rate,
    fig7_ensemble,
    iter_stream_chunks,
    molecules_with_bleach_lifetime,
    photon_budget,
    simulate_bleaching_survival,
    simulate_detailed,
    simulate_stream,
)
from photostat.errors import InvalidConfig
from photostat.models.survival import fit_survival


def within(observed, expected, n_sigma=5):
    return abs(observed - expected) <= n_sigma * math.sqrt(expected)


def test_dark_counts_only_are_poisson():
    ens = EmitterEnsemble([], detection=DetectionConfig(dark_rate_per_detector=1e4), duration=5.0, seed=4)
    s = simulate_stream(ens)
    for ch in (0, 1):
        t = s.channel_times(ch)
        assert within(t.size, 5e4)
        gaps = np.diff(t) / PS_PER_S
        assert stats.kstest(gaps, "expon", args=(0, 1e-4)).pvalue > 1e-3


def test_zero_efficiency_no_darks_gives_empty_stream():
    ens = EmitterEnsemble([MoleculePhotophysics()], detection=DetectionConfig(efficiency=0.0), duration=1.0)
    assert len(simulate_stream(ens)) == 0


def test_pulsed_rate_and_split():
    ens = EmitterEnsemble([MoleculePhotophysics()], ExcitationConfig("pulsed", 25.0, 0.2),
                          DetectionConfig(0.05, 0.3), duration=0.2, seed=5)
    s = simulate_stream(ens)
    expected = 0.2 / 25e-9 * 0.05 * 0.2
    assert within(len(s), expected)
    assert within(s.channel_times(0).size, 0.3 * expected)


def test_at_most_one_click_per_pulse():
    # with a 1 ps lifetime every photon falls inside its own pulse period
    ens = EmitterEnsemble([MoleculePhotophysics(t1=0.001)], ExcitationConfig("pulsed", 25.0, 0.9),
                          DetectionConfig(1.0), duration=1e-3, seed=6)
    t = simulate_stream(ens).times
    pulse = t // 25_000
    assert t.size > 30_000
    assert np.unique(pulse).size == pulse.size


def test_cw_rate():
    t1 = 4.23
    ens = EmitterEnsemble([MoleculePhotophysics(t1=t1)], ExcitationConfig("cw", intensity=75.0, i_sat=75.0),
                          DetectionConfig(0.01), duration=0.02, seed=7)
    expected = 1 / (4 * t1 * 1e-9) * 0.01 * 0.02
    assert within(len(simulate_stream(ens)), expected)
    assert cw_scattering_rate(75.0, 75.0, t1) == pytest.approx(1 / (4 * t1 * 1e-9))


def test_emission_delay_is_exponential_with_t1():
    ens = EmitterEnsemble([MoleculePhotophysics(t1=4.23)], ExcitationConfig("pulsed", 100.0, 0.5),
                          DetectionConfig(1.0), duration=2e-3, seed=8)
    t = simulate_stream(ens).times
    delay_ns = (t % 100_000) / 1000.0
    assert np.mean(delay_ns) == pytest.approx(4.23 + 0.0005, rel=0.02)


def test_bleached_molecule_goes_dark():
    exc = ExcitationConfig("pulsed", 25.0, 0.1)
    mol = molecules_with_bleach_lifetime(1, 0.01, exc)[0]
    ens = EmitterEnsemble([mol], exc, DetectionConfig(0.5), duration=1.0, seed=9)
    s, rep = simulate_detailed(ens)
    assert rep.bleach_times_ps[0] is not None
    assert s.times.max() <= rep.bleach_times_ps[0] + 200_000


def test_bleach_time_distribution():
    exc = ExcitationConfig("pulsed", 25.0, 0.1)
    times = []
    for seed in range(200):
        mol = molecules_with_bleach_lifetime(1, 1e-3, exc)[0]
        _, rep = simulate_detailed(EmitterEnsemble([mol], exc, DetectionConfig(0.0), duration=0.1, seed=seed))
        times.append(rep.bleach_times_ps[0] / PS_PER_S)
    assert np.mean(times) == pytest.approx(1e-3, rel=0.25)


def test_triplet_shelving_reduces_rate():
    exc = ExcitationConfig("pulsed", 25.0, 0.1)
    mol = MoleculePhotophysics(isc_yield=0.01, triplet_lifetime=10.0)
    ens = EmitterEnsemble([mol], exc, DetectionConfig(0.1), duration=0.05, seed=10)
    s, rep = simulate_detailed(ens)
    assert rep.n_shelved[0] > 100
    # renewal: one excitation per 250 ns on average plus isc * 10 us of triplet dwell
    excitation_rate = 1 / (250e-9 + 0.01 * 10e-6)
    expected = 0.05 * excitation_rate * (1 - 0.01) * 0.1
    assert len(s) == pytest.approx(expected, rel=0.05)


def test_shelving_needs_triplet_lifetime():
    mol = MoleculePhotophysics(isc_yield=0.5)
    _, rep = simulate_detailed(EmitterEnsemble([mol], duration=1e-3))
    assert rep.n_shelved == [0]


def test_determinism_and_seed_sensitivity():
    ens = fig7_ensemble(duration=0.5, seed=11)
    assert simulate_stream(ens) == simulate_stream(ens)
    other = fig7_ensemble(duration=0.5, seed=12)
    assert not np.array_equal(simulate_stream(ens).times[:100], simulate_stream(other).times[:100])


def test_chunks_concatenate_to_stream_and_are_sorted():
    ens = fig7_ensemble(duration=0.5, seed=13)
    ens.chunk_duration = 0.1
    chunks = list(iter_stream_chunks(ens))
    assert len(chunks) == 5
    t = np.concatenate([c.times for c in chunks])
    assert np.all(np.diff(t) >= 0)
    assert np.array_equal(t, simulate_stream(ens).times)


def test_molecule_photons_independent_of_chunking():
    mk = lambda cd: EmitterEnsemble([MoleculePhotophysics()], duration=0.3, seed=14, chunk_duration=cd)
    assert simulate_stream(mk(0.3)).times.tolist() == simulate_stream(mk(0.07)).times.tolist()


def test_fig7_ensemble_rate():
    s = simulate_stream(fig7_ensemble(duration=2.0, seed=15))
    for ch in (0, 1):
        assert s.channel_times(ch).size / 2.0 == pytest.approx(4e4, rel=0.02)


def test_short_period_warns():
    with pytest.warns(UserWarning):
        EmitterEnsemble([MoleculePhotophysics(t1=10.0)], ExcitationConfig("pulsed", 20.0)).validate()


def test_config_validation():
    with pytest.raises(InvalidConfig):
        EmitterEnsemble.from_dict({"molecules": [{"t1": 1.0, "bogus": 2}]})
    with pytest.raises(InvalidConfig):
        EmitterEnsemble([MoleculePhotophysics(t1=-1.0)]).validate()
    with pytest.raises(InvalidConfig):
        EmitterEnsemble([], ExcitationConfig("laser")).validate()


def test_ensemble_dict_round_trip():
    ens = fig7_ensemble(duration=3.0, seed=2)
    assert EmitterEnsemble.from_dict(ens.to_dict()) == ens


def test_photon_budget_values():
    assert 1e7 <= photon_budget(10, 75, 4.23, 5.7) < 1e9
    assert photon_budget(130, 75, 4.23, 15600) > 1e12


def test_survival_no_bleaching_is_flat():
    exc = ExcitationConfig("cw", intensity=10.0)
    pop = [MoleculePhotophysics() for _ in range(20)]
    curve = simulate_bleaching_survival(pop, exc, [0, 10, 100])
    assert curve.counts.tolist() == [20, 20, 20]


def test_survival_lifetime_recovered_on_average():
    exc = ExcitationConfig("cw", intensity=10.0)
    cps = np.arange(0.0, 31.0)
    taus = []
    for seed in range(40):
        pop = molecules_with_bleach_lifetime(36, 5.7, exc)
        curve = simulate_bleaching_survival(pop, exc, cps, seed=seed)
        taus.append(fit_survival(curve).value("tau"))
    assert np.mean(taus) == pytest.approx(5.7, rel=0.2)


def test_survival_checkpoints_must_be_sorted():
    with pytest.raises(InvalidConfig):
        simulate_bleaching_survival([MoleculePhotophysics()], ExcitationConfig(), [10, 5])
