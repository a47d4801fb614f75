"""Acceptance criteria, one ``criterion`` marker per criterion.

The terminal summary prints one PASS/FAIL line per criterion.
"""

import math
import time

import numpy as np
import pytest

from photostat.core import AcquisitionMeta, make_rng
from photostat.correlator import (
    CorrelationHistogram,
    StreamingCorrelator,
    brute_force_histogram,
    cross_correlate,
    symmetric_window,
    window_bins,
)
from photostat.emitter_sim import fig7_ensemble, photon_budget
from photostat.imaging import (
    EmitterLayout,
    Emitter,
    ScanConfig,
    angle_grid,
    crystal_batch,
    detect_spots,
    detection_image,
    expected_image,
    extract_polarization_series,
    scan_series,
    _gauss2d,
    _gauss2d_jac,
)
from photostat.models import (
    G2TrainParams,
    PolarizationParams,
    SaturationParams,
    SurvivalCurve,
    eval_g2_train,
    eval_malus,
    eval_saturation,
    fit_g2,
    fit_polarization,
    fit_saturation,
    fit_survival,
    g2_train_direct,
    g2_zero_from_areas,
    levenberg_marquardt,
)
from photostat.models.g2 import g2_train_jacobian
from photostat.models.lm import finite_difference_jacobian
from photostat.models.polarization import malus_jacobian
from photostat.models.saturation import saturation_jacobian, synthetic_saturation_points
from photostat.models.survival import BIEXP, SINGLE, _jac_vec, _model_vec
from photostat.recipes import FIG9_CHECKPOINTS, FIG9_TARGETS, checkpoint_agreement, checkpoint_sigma, correlate_ensemble
from photostat.emitter_sim import simulate_bleaching_survival
from photostat.recipes import fig9_population
from photostat.thermo import (
    PRESETS,
    ThermoScenario,
    crossover_temperature,
    delta_mu,
    extract_sigma,
    vapor_pressure,
)

C0 = 273.15
FIG7_TRUTH = G2TrainParams(44.7, 1000.0, 1.53, 4.23, 25.0)
BIN_PS = 106.9
N_SEEDS_FIG7 = 40

G2_EXACT = "g2 model exactness"
FIG7 = "fig7 parameter recovery"
ANTIBUNCH = "antibunching identity"
CORR = "correlator oracle equivalence"
SAT = "saturation"
THERMO = "thermodynamics"
BUDGET = "photon budgets"
BLEACH = "bleaching"
POL = "polarization pipeline"
HYGIENE = "numerical hygiene"


def _hist(counts):
    lo, _ = symmetric_window(150_000.0, BIN_PS)
    n = len(counts)
    return CorrelationHistogram(BIN_PS, lo, lo + n * BIN_PS, np.asarray(counts, float), 0, 0, AcquisitionMeta())


def _model_counts(params):
    lo, hi = symmetric_window(150_000.0, BIN_PS)
    n = window_bins(lo, hi, BIN_PS)
    centers = lo + BIN_PS * (np.arange(n) + 0.5)
    return eval_g2_train(centers / 1000.0, params)


def _within(value, truth, err, k=3.0):
    return abs(value - truth) <= k * err


# --- g2 exactness -------------------------------------------------------------

@pytest.mark.criterion(G2_EXACT)
def test_g2_matches_direct_sum():
    rng = np.random.default_rng(2024)
    n_sets, per_set = 100, 100
    sets = [G2TrainParams(rng.uniform(0, 100), rng.uniform(10, 1e4), rng.uniform(1, 10),
                          rng.uniform(0.5, 10), rng.uniform(12.5, 50)) for _ in range(n_sets)]
    taus = [rng.uniform(-10 * p.pulse_period, 10 * p.pulse_period, per_set) for p in sets]
    t0 = time.perf_counter()
    fast = [eval_g2_train(t, p) for t, p in zip(taus, sets)]
    elapsed = time.perf_counter() - t0
    worst = max(np.max(np.abs(f / g2_train_direct(t, p) - 1)) for f, t, p in zip(fast, taus, sets))
    print(f"g2 exactness: worst relative error {worst:.2e}, {n_sets * per_set} points in {elapsed:.3f} s")
    assert worst <= 1e-12
    assert elapsed < 1.0


# --- fig7 -----------------------------------------------------------------------

@pytest.mark.criterion(FIG7)
def test_fig7_noiseless_recovery():
    res = fit_g2(_hist(_model_counts(FIG7_TRUTH)))
    truth = dict(background_b=44.7, amplitude_n=1000.0, n_molecules_m=1.53, t1=4.23)
    for name, v in truth.items():
        assert abs(res.value(name) / v - 1) <= 1e-4, name


@pytest.fixture(scope="module")
def sampled_fits():
    """Poisson draws from the model at the fig7 reference parameters."""
    lam = _model_counts(FIG7_TRUTH)
    return [fit_g2(_hist(make_rng(s, 9).poisson(lam))) for s in range(N_SEEDS_FIG7)]


@pytest.fixture(scope="module")
def simulated_fig7():
    """Full 30 min single-molecule acquisitions at 4e4 clicks/s per detector."""
    out = []
    for s in range(N_SEEDS_FIG7):
        ens = fig7_ensemble(duration=1800.0, seed=1000 + s)
        hist, _ = correlate_ensemble(ens)
        out.append((hist, fit_g2(hist, pulse_period=ens.excitation.pulse_period)))
    return out


@pytest.mark.criterion(FIG7)
def test_fig7_noise_coverage_sampled(sampled_fits):
    m_ok = np.mean([_within(r.value("n_molecules_m"), 1.53, r.error("n_molecules_m")) for r in sampled_fits])
    t_ok = np.mean([_within(r.value("t1"), 4.23, r.error("t1")) for r in sampled_fits])
    print(f"fig7 sampled route: m coverage {m_ok:.3f}, T1 coverage {t_ok:.3f}")
    assert m_ok >= 0.95 and t_ok >= 0.95


@pytest.mark.slow
@pytest.mark.criterion(FIG7)
def test_fig7_noise_coverage_simulated(simulated_fig7):
    fits = [r for _, r in simulated_fig7]
    m_ok = np.mean([_within(r.value("n_molecules_m"), 1.0, r.error("n_molecules_m")) for r in fits])
    t_ok = np.mean([_within(r.value("t1"), 4.23, r.error("t1")) for r in fits])
    print(f"fig7 simulated route: m coverage {m_ok:.3f}, T1 coverage {t_ok:.3f}")
    assert m_ok >= 0.95 and t_ok >= 0.95


# --- antibunching -----------------------------------------------------------------

@pytest.mark.criterion(ANTIBUNCH)
def test_g2_zero_identity_on_converged_fits(sampled_fits):
    for r in sampled_fits:
        assert r.converged
        assert r.derived["g2_zero"][0] == 1.0 - 1.0 / r.value("n_molecules_m")


@pytest.mark.slow
@pytest.mark.criterion(ANTIBUNCH)
def test_single_molecule_area_ratio(simulated_fig7):
    ratios = []
    for hist, r in simulated_fig7:
        assert r.derived["g2_zero"][0] == 1.0 - 1.0 / r.value("n_molecules_m")
        ratios.append(g2_zero_from_areas(hist, r.value("background_b")))
    print(f"background-corrected g2(0): max {max(ratios):.3f} over {len(ratios)} single molecules")
    assert max(ratios) < 0.5


# --- correlator -----------------------------------------------------------------

def _random_pair(rng, n_a, n_b):
    span = int(rng.uniform(1e6, 1e8))
    a = np.sort(rng.integers(0, span, n_a))
    b = np.sort(rng.integers(0, span, n_b))
    if n_b and rng.uniform() < 0.5:
        # correlated partners so the window holds many pairs
        b = np.sort(np.concatenate([b, a[: n_b // 2] + rng.integers(-20_000, 20_000, min(n_a, n_b // 2))]))
    return a, b


@pytest.mark.criterion(CORR)
def test_correlator_matches_brute_force():
    rng = np.random.default_rng(77)
    for k in range(200):
        if k < 4:
            n_a = n_b = 10_000
        else:
            n_a, n_b = (int(x) for x in np.exp(rng.uniform(0, math.log(1e4), 2)))
        a, b = _random_pair(rng, n_a, n_b)
        bw = float(rng.choice([1.0, 106.9, 250.0, rng.uniform(1, 500)]))
        half = float(rng.uniform(1_000, 50_000))
        window = symmetric_window(half, bw, centered=bool(rng.integers(2)))
        ref = brute_force_histogram(a, b, bw, window)
        assert np.array_equal(cross_correlate(a, b, bw, window).counts, ref), k
        sc = StreamingCorrelator(bw, window)
        cuts = np.sort(rng.integers(0, max(int(max(a[-1] if a.size else 0, b[-1] if b.size else 0)), 1), 3))
        lo = np.iinfo(np.int64).min
        for c in list(cuts) + [np.iinfo(np.int64).max]:
            sc.add(a[(a > lo) & (a <= c)], b[(b > lo) & (b <= c)])
            lo = c
        assert np.array_equal(sc.result().counts, ref), k


@pytest.mark.slow
@pytest.mark.criterion(CORR)
def test_correlator_throughput():
    rng = np.random.default_rng(5)
    n = 10_000_000
    a = np.cumsum(rng.exponential(25e6, n)).astype(np.int64)  # 4e4 /s
    b = np.cumsum(rng.exponential(25e6, n)).astype(np.int64)
    window = symmetric_window(1_000_000.0, BIN_PS)
    cross_correlate(a[:1000], b[:1000], BIN_PS, window)  # compile outside the timer
    t0 = time.perf_counter()
    hist = cross_correlate(a, b, BIN_PS, window)
    elapsed = time.perf_counter() - t0
    print(f"correlator: 1e7 clicks/channel, +-1 us window, {elapsed:.2f} s, {int(hist.counts.sum())} pairs")
    assert elapsed < 60.0


# --- saturation -----------------------------------------------------------------

@pytest.mark.criterion(SAT)
def test_saturation_noiseless_and_identity():
    res = fit_saturation(synthetic_saturation_points(noise=0.0))
    assert abs(res.value("i_sat") / 75.0 - 1) <= 1e-8
    assert abs(res.value("r_max") / 440e3 - 1) <= 1e-8
    p = SaturationParams(res.value("i_sat"), res.value("r_max"))
    assert eval_saturation(p.i_sat, p) == pytest.approx(p.r_max / 2, rel=1e-15)


@pytest.mark.criterion(SAT)
def test_saturation_monte_carlo():
    hits = [abs(fit_saturation(synthetic_saturation_points(noise=0.02, seed=s)).value("i_sat") / 75 - 1) <= 0.05
            for s in range(1, 51)]
    print(f"saturation: {np.mean(hits):.2f} of 50 seeds within 5%")
    assert np.mean(hits) >= 0.9


# --- thermodynamics -------------------------------------------------------------

@pytest.mark.criterion(THERMO)
def test_sigma_extraction():
    s, e = extract_sigma(410.0, 51.7, 3.3, 20.0)
    assert round(s, 2) == 2.63 and round(e, 2) == 0.19
    assert round(s, 1) == 2.6 and round(e, 1) == 0.2


@pytest.mark.criterion(THERMO)
@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_thermo_presets(preset):
    t0 = time.perf_counter()
    assert delta_mu(ThermoScenario(298.15, preset)) == 0.0
    assert delta_mu(ThermoScenario(400.0, preset, t_top=400.0)) == 0.0
    p_tt = vapor_pressure(298.15, preset)
    r_lo = vapor_pressure(220 + C0, preset) / p_tt
    r_hi = vapor_pressure(240 + C0, preset) / p_tt
    assert r_lo <= 3.4e7 and r_hi >= 0.4e7
    tx = crossover_temperature(ThermoScenario(298.15, preset, sigma_substrate=2.6)) - C0
    elapsed = time.perf_counter() - t0
    print(f"{preset}: ratio {r_lo:.3g}..{r_hi:.3g}, crossover {tx:.1f} C, {elapsed * 1e3:.1f} ms")
    assert 220.0 <= tx <= 240.0
    assert elapsed < 0.5


# --- photon budgets -------------------------------------------------------------

@pytest.mark.criterion(BUDGET)
def test_photon_budgets():
    assert 1e7 <= photon_budget(10.0, 75.0, 4.23, 5.7) < 1e9
    assert photon_budget(130.0, 75.0, 4.23, 15600.0) > 1e12


# --- bleaching ------------------------------------------------------------------

@pytest.mark.criterion(BLEACH)
def test_survival_exact_fits():
    t = np.linspace(0, 30, 31)
    one = fit_survival(SurvivalCurve(t, 36 * np.exp(-t / 5.7)), SINGLE)
    assert np.allclose(one.values, [36, 5.7], rtol=1e-8)
    grid = np.concatenate([np.linspace(0, 60, 31), np.geomspace(90, 15600, 40)])
    y = 15 * np.exp(-grid / 5.7) + 31 * np.exp(-grid / 1000) + 30
    two = fit_survival(SurvivalCurve(grid, y), BIEXP)
    assert np.allclose(two.values, [15, 5.7, 31, 1000, 30], rtol=1e-8)


@pytest.mark.criterion(BLEACH)
def test_bleaching_checkpoints():
    pop, exc = fig9_population()
    counts = np.array([simulate_bleaching_survival(pop, exc, FIG9_CHECKPOINTS, seed=s).counts for s in range(100)])
    mean_ok, seed_ok = checkpoint_agreement(counts)
    print(f"bleaching: mean survivors {np.round(counts.mean(axis=0), 2).tolist()} vs {list(FIG9_TARGETS)}, "
          f"3 sd = {np.round(3 * checkpoint_sigma(), 2).tolist()}, seeds within 3 sd: {seed_ok.mean():.2f}")
    assert mean_ok.all()


# --- polarization ---------------------------------------------------------------

@pytest.mark.criterion(POL)
def test_polarization_end_to_end():
    rng = np.random.default_rng(12)
    cfg0 = ScanConfig(field_size=(8.0, 8.0), pixels=(100, 100))
    angles = angle_grid("0:180:15")
    worst = 0.0
    for s in range(20):
        truth = float(rng.uniform(0, 180))
        cfg = ScanConfig.from_dict({**cfg0.to_dict(), "seed": 500 + s})
        layout = EmitterLayout([Emitter(float(rng.uniform(2, 6)), float(rng.uniform(2, 6)), truth)])
        snr = cfg.dwell_rate_scale / math.sqrt(cfg.dwell_rate_scale + cfg.background_rate)
        assert snr >= 10
        frames = scan_series(layout, cfg, angles)
        spots = detect_spots(detection_image(frames) / len(frames), cfg)
        assert len(spots) == 1 and spots[0].isolation_flag
        series = extract_polarization_series(frames, spots, cfg)
        fitted = fit_polarization(series[0].points()).derived["dipole_angle_deg"][0]
        worst = max(worst, abs((fitted - truth + 90) % 180 - 90))
    print(f"polarization pipeline: worst dipole error {worst:.2f} deg over 20 spots")
    assert worst <= 2.0


@pytest.mark.criterion(POL)
def test_polarization_equivariance_and_null():
    th = np.arange(0, 180, 12.0)
    y = eval_malus(th, PolarizationParams(0.8, 0.1, 33.0))
    base = fit_polarization(np.column_stack([th, y]))
    for delta in (-50.0, 7.5, 90.0, 245.0):
        moved = fit_polarization(np.column_stack([th + delta, y]))
        assert abs((moved.values[2] - base.values[2] + delta + 90) % 180 - 90) < 1e-6
    cfg = ScanConfig(background_rate=0.0, polarizer_angle_deg=123.0)
    assert expected_image(EmitterLayout([Emitter(8.0, 8.0, 33.0)]), cfg).max() < 1e-20


@pytest.mark.criterion(POL)
def test_crystal_batch_histogram():
    res = crystal_batch(n_molecules=58, n_crystals=12, spread_deg=3.0, seed=0)
    frac = res.fraction_within(10.0)
    print(f"58-molecule batch: {res.n_detected} detected, {frac:.2f} within 10 deg of crystal mean")
    assert res.n_detected == 58 and frac >= 0.9


# --- numerical hygiene ----------------------------------------------------------

def _jac_close(analytic, numeric, f, x):
    # a column that underflows next to O(1) model values is judged against |f| / |x|,
    # the smallest derivative a perturbation of x_j could resolve
    scale = np.maximum(np.abs(analytic).max(axis=0), np.abs(f).max() / np.maximum(np.abs(x), 1.0))
    return np.max(np.abs(analytic - numeric) / scale)


@pytest.mark.criterion(HYGIENE)
def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(99)
    worst = {}

    def check(name, fun, jac, x):
        err = _jac_close(np.asarray(jac(x)), finite_difference_jacobian(fun, x, 1e-6), fun(x), x)
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(100):
        tau = rng.uniform(-100, 100, 50)
        x = np.array([rng.uniform(0, 100), rng.uniform(1, 2000), rng.uniform(1, 5), rng.uniform(1, 8), rng.uniform(20, 30)])

        def g2(v):
            return eval_g2_train(tau, G2TrainParams(*v))

        check("g2", g2, lambda v: g2_train_jacobian(tau, G2TrainParams(*v), include_period=True), x)

        inten = rng.uniform(0, 1000, 30)
        xs = np.array([rng.uniform(10, 200), rng.uniform(1e4, 1e6)])
        check("saturation", lambda v: eval_saturation(inten, SaturationParams(*v)),
              lambda v: saturation_jacobian(inten, SaturationParams(*v)), xs)

        th = rng.uniform(0, 360, 20)
        xp = np.array([rng.uniform(0.1, 2), rng.uniform(0, 1), rng.uniform(0, 180)])
        check("malus", lambda v: eval_malus(th, PolarizationParams(*v)),
              lambda v: malus_jacobian(th, PolarizationParams(*v)), xp)

        t = rng.uniform(0, 2000, 25)
        x1 = np.array([rng.uniform(1, 100), rng.uniform(1, 500)])
        check("survival single", lambda v: _model_vec(SINGLE, t, v), lambda v: _jac_vec(SINGLE, t, v), x1)
        x2 = np.array([rng.uniform(1, 50), rng.uniform(1, 20), rng.uniform(1, 50), rng.uniform(100, 2000),
                       rng.uniform(0, 50)])
        check("survival biexp", lambda v: _model_vec(BIEXP, t, v), lambda v: _jac_vec(BIEXP, t, v), x2)

        xx, yy = rng.uniform(0, 2, 40), rng.uniform(0, 2, 40)
        xg = np.array([rng.uniform(10, 500), rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), rng.uniform(0.1, 0.4),
                       rng.uniform(0, 10)])
        check("gauss2d", lambda v: _gauss2d(v, xx, yy), lambda v: _gauss2d_jac(v, xx, yy), xg)
    print("jacobian worst relative error: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert max(worst.values()) <= 1e-6


@pytest.mark.criterion(HYGIENE)
def test_lm_bent_valley():
    def model(p):
        return np.array([10 * (p[1] - p[0] ** 2), 1 - p[0]])

    def jac(p):
        return np.array([[-20 * p[0], 10.0], [-1.0, 0.0]])

    res = levenberg_marquardt(model, [-1.2, 1.0], np.zeros(2), jacobian=jac)
    assert np.max(np.abs(res.values - 1.0)) <= 1e-8
