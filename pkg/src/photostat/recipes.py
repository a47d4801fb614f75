"""End-to-end pipelines that regenerate each figure-level result from a seed.

Every recipe writes its artifacts into ``out_dir`` and returns a summary dict
(also written as ``summary.json``).
"""

from __future__ import annotations

import csv
import logging
import math
from importlib import resources
from pathlib import Path

import numpy as np

from . import imaging, thermo
from .core import load_json, write_json, write_timetag_chunks
from .correlator import StreamingCorrelator, symmetric_window, write_histogram
from .emitter_sim import (
    EmitterEnsemble,
    ExcitationConfig,
    acquisition_meta,
    fig7_ensemble,
    iter_stream_chunks,
    molecules_with_bleach_lifetime,
    simulate_bleaching_survival,
)
from .models.g2 import fit_g2, g2_zero_from_areas
from .models.saturation import fit_saturation, synthetic_saturation_points
from .models.survival import (
    BIEXP,
    SINGLE,
    SurvivalCurve,
    SurvivalModel,
    eval_survival,
    fit_survival,
    write_survival_csv,
)

log = logging.getLogger(__name__)

FIG7_BIN_PS = 106.9
FIG7_HALF_WINDOW_PS = 150_000.0
FIG9_CHECKPOINTS = (60.0, 3600.0, 15600.0)  # 1 min, 1 h, 4 h 20 min
FIG9_TARGETS = (60, 32, 30)


def bundled(name):
    """Path to a data file shipped with the package."""
    return resources.files("photostat") / "data" / name


def correlate_ensemble(ensemble, stream_path=None, stream_format="binary",
                       bin_width=FIG7_BIN_PS, half_window=FIG7_HALF_WINDOW_PS):
    """Simulate ``ensemble`` chunk by chunk into a streaming correlator.

    Memory stays bounded by one chunk, so full 30-minute acquisitions are
    fine. When ``stream_path`` is given the clicks are also written there.
    """
    meta = acquisition_meta(ensemble)
    meta.bin_width = bin_width
    sc = StreamingCorrelator(bin_width, symmetric_window(half_window, bin_width), meta)

    def feed():
        for chunk in iter_stream_chunks(ensemble):
            sc.add_stream(chunk)
            yield chunk

    if stream_path is not None:
        n = write_timetag_chunks(feed(), stream_path, meta, stream_format)
    else:
        n = sum(len(c) for c in feed())
    return sc.result(), n


def fig7(out_dir, seed=1, duration=1800.0, write_stream=False, stream_format="binary"):
    """Single molecule under 25 ns pulses at 4e4 clicks/s per detector."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ens = fig7_ensemble(duration=duration, seed=seed)
    write_json(ens.to_dict(), out / "ensemble.json")
    stream_path = out / ("stream.bin" if stream_format == "binary" else "stream.csv") if write_stream else None
    hist, n_clicks = correlate_ensemble(ens, stream_path, stream_format)
    write_histogram(hist, out / "hist.csv")
    res = fit_g2(hist, pulse_period=ens.excitation.pulse_period)
    write_json(res.to_dict(), out / "fit_g2.json")
    b = res.value("background_b")
    summary = {
        "recipe": "fig7",
        "seed": seed,
        "duration_s": duration,
        "n_clicks": n_clicks,
        "n_molecules_true": len(ens.molecules),
        "background_b": b,
        "amplitude_n": res.value("amplitude_n"),
        "n_molecules_m": res.value("n_molecules_m"),
        "n_molecules_m_err": res.error("n_molecules_m"),
        "t1_ns": res.value("t1"),
        "t1_err_ns": res.error("t1"),
        "g2_zero": res.derived["g2_zero"][0],
        "g2_zero_area_ratio": g2_zero_from_areas(hist, b, ens.excitation.pulse_period),
        "converged": res.converged,
        "flags": res.flags,
    }
    summary["single_emitter"] = summary["g2_zero_area_ratio"] < 0.5
    write_json(summary, out / "summary.json")
    return summary


def fig8(out_dir, seed=0, points_path=None, noise=0.02):
    """Saturation fit; uses the bundled 75 kW/cm^2 data set unless ``points_path`` or a seed other than 0 is given."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if points_path is not None:
        pts = read_table(points_path)
    elif seed == 0:
        pts = read_table(bundled("sat75.csv"))
    else:
        pts = synthetic_saturation_points(noise=noise, seed=seed)
    write_table(out / "points.csv", ["intensity_kw_cm2", "rate_cps", "sigma_cps"], pts)
    res = fit_saturation(pts)
    write_json(res.to_dict(), out / "fit_saturation.json")
    summary = {
        "recipe": "fig8",
        "seed": seed,
        "i_sat": res.value("i_sat"),
        "i_sat_err": res.error("i_sat"),
        "r_max": res.value("r_max"),
        "r_max_err": res.error("r_max"),
        "converged": res.converged,
    }
    write_json(summary, out / "summary.json")
    return summary


def fig6(out_dir, seed=0, n_molecules=58, n_crystals=12, spread_deg=3.0):
    """Polarization batch over several synthetic crystals."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    batch = imaging.crystal_batch(n_molecules, n_crystals, spread_deg, seed=seed)
    rows = np.column_stack([batch.groups, batch.true_angles, batch.fitted_angles, batch.spread_deg])
    write_table(out / "molecules.csv", ["crystal", "true_angle_deg", "fitted_angle_deg", "deviation_deg"], rows)
    edges, counts = batch.histogram()
    write_table(out / "spread_hist.csv", ["bin_lo_deg", "bin_hi_deg", "count"],
                np.column_stack([edges[:-1], edges[1:], counts]))
    summary = {
        "recipe": "fig6",
        "seed": seed,
        "n_expected": batch.n_expected,
        "n_detected": batch.n_detected,
        "fraction_within_10deg": batch.fraction_within(10.0),
        "spread_sd_deg": float(np.std(batch.spread_deg)) if batch.spread_deg.size else None,
        "max_abs_error_deg": float(np.max(np.abs(batch.errors_deg))) if batch.errors_deg.size else None,
    }
    write_json(summary, out / "summary.json")
    return summary


def fig9_population(excitation=None, t1=4.23):
    """15 fast (5.7 s), 31 slow (1000 s) and 30 photostable molecules."""
    exc = excitation or ExcitationConfig("cw", intensity=130.0, i_sat=75.0)
    return (
        molecules_with_bleach_lifetime(15, 5.7, exc, t1)
        + molecules_with_bleach_lifetime(31, 1000.0, exc, t1)
        + molecules_with_bleach_lifetime(30, math.inf, exc, t1)
    ), exc


def fig9(out_dir, seed=0, n_seeds=100):
    """Bleaching: exact fits of both survival laws plus a seeded population study."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dense = np.linspace(0.0, 30.0, 31)
    air = SurvivalCurve(dense, 36.0 * np.exp(-dense / 5.7), 36)
    fit_air = fit_survival(air, SINGLE)
    grid = np.concatenate([np.linspace(0, 60, 31), np.geomspace(90, 15600, 40)])
    truth = SurvivalModel(BIEXP, {"n1": 15.0, "tau1": 5.7, "n2": 31.0, "tau2": 1000.0, "c": 30.0})
    mixed = SurvivalCurve(grid, eval_survival(grid, truth), 76)
    fit_mixed = fit_survival(mixed, BIEXP)
    write_json(fit_air.to_dict(), out / "fit_single.json")
    write_json(fit_mixed.to_dict(), out / "fit_biexp.json")

    pop, exc = fig9_population()
    counts = np.array([
        simulate_bleaching_survival(pop, exc, FIG9_CHECKPOINTS, seed=seed * 100_000 + k).counts
        for k in range(n_seeds)
    ])
    write_survival_csv(SurvivalCurve(np.array(FIG9_CHECKPOINTS), counts[0], len(pop)), out / "survival_seed0.csv")
    write_table(out / "survival_seeds.csv", ["seed_index"] + [f"t{int(c)}s" for c in FIG9_CHECKPOINTS],
                np.column_stack([np.arange(n_seeds), counts]))
    mean_ok, seed_ok = checkpoint_agreement(counts)
    summary = {
        "recipe": "fig9",
        "seed": seed,
        "single": dict(zip(fit_air.names, fit_air.values.tolist())),
        "biexp": dict(zip(fit_mixed.names, fit_mixed.values.tolist())),
        "checkpoints_s": list(FIG9_CHECKPOINTS),
        "targets": list(FIG9_TARGETS),
        "mean_counts": counts.mean(axis=0).tolist(),
        "binomial_sd": checkpoint_sigma().tolist(),
        "mean_within_3sigma": mean_ok.tolist(),
        "fraction_seeds_within_3sigma": float(seed_ok.mean()),
    }
    write_json(summary, out / "summary.json")
    return summary


def checkpoint_sigma(checkpoints=FIG9_CHECKPOINTS):
    """Binomial sd of the survivor count at each checkpoint for the fig9 population."""
    groups = [(15, 5.7), (31, 1000.0)]
    var = np.zeros(len(checkpoints))
    for n, tau in groups:
        p = np.exp(-np.asarray(checkpoints) / tau)
        var += n * p * (1 - p)
    return np.sqrt(var)


def checkpoint_agreement(counts, targets=FIG9_TARGETS, checkpoints=FIG9_CHECKPOINTS):
    """Compare simulated survivor counts (rows = seeds) with the target counts.

    Returns ``(mean_ok, per_seed_ok)``: whether the seed-averaged count at each
    checkpoint lies within 3 binomial sd of the target, and for each seed
    whether all of its counts do.
    """
    counts = np.asarray(counts, dtype=float)
    tol = 3 * checkpoint_sigma(checkpoints)
    dev = np.abs(counts - np.asarray(targets, dtype=float))
    mean_ok = np.abs(counts.mean(axis=0) - np.asarray(targets, dtype=float)) <= tol
    return mean_ok, np.all(dev <= tol, axis=1)


def sec2_thermo(out_dir, delta_mu_meas=410.0, delta_mu_err=20.0, presets=None, t_range="130C:260C:1C"):
    """Substrate energy from the measured drive, then the morphology sweep per preset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sigma, sigma_err = thermo.extract_sigma(delta_mu_meas, thermo.UNIT_CELL_AB, thermo.GAMMA_001, delta_mu_err)
    tbs = thermo.parse_temperature_range(t_range)
    per = {}
    for name in presets or sorted(thermo.PRESETS):
        reports = thermo.sweep(tbs, correlation=name, sigma_substrate=sigma)
        write_sweep_csv(reports, out / f"sweep_{name}.csv")
        sc = thermo.ThermoScenario(t_bottom=tbs[0], correlation=name, sigma_substrate=sigma)
        tx = thermo.crossover_temperature(sc)
        ratios = [thermo.thermo_report(thermo.ThermoScenario(t, name)).pressure_ratio
                  for t in (493.15, 503.15, 513.15)]
        per[name] = {
            "source": thermo.PRESETS[name].source_label,
            "crossover_c": tx - 273.15,
            "pressure_ratio_220_230_240c": ratios,
            "delta_mu_220c": thermo.delta_mu(thermo.ThermoScenario(493.15, name)),
            "delta_mu_240c": thermo.delta_mu(thermo.ThermoScenario(513.15, name)),
        }
    summary = {
        "recipe": "sec2-thermo",
        "delta_mu_meas": delta_mu_meas,
        "delta_mu_err": delta_mu_err,
        "sigma": sigma,
        "sigma_err": sigma_err,
        "delta_mu_critical": thermo.critical_delta_mu(sigma=sigma),
        "presets": per,
    }
    write_json(summary, out / "summary.json")
    return summary


def write_sweep_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_bottom_k", "t_bottom_c", "pressure_ratio", "delta_mu_mev", "delta_mu_critical_mev",
                    "morphology", "out_of_range"])
        for r in reports:
            w.writerow([repr(r.t_bottom), repr(r.t_bottom - 273.15), repr(r.pressure_ratio), repr(r.delta_mu),
                        "" if r.delta_mu_critical is None else repr(r.delta_mu_critical),
                        r.predicted_morphology or "", int(bool(r.out_of_range_flags))])


def read_table(path):
    """Numeric CSV with an optional header line."""
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",")]
        skip = 0
    except ValueError:
        skip = 1
    return np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)


def write_table(path, header, rows):
    np.savetxt(path, np.asarray(rows, dtype=float), delimiter=",", header=",".join(header), comments="",
               fmt="%.17g")


def load_ensemble(path):
    return EmitterEnsemble.from_dict(load_json(path))


RECIPES = {
    "fig7": fig7,
    "fig8": fig8,
    "fig6": fig6,
    "fig9": fig9,
    "sec2-thermo": sec2_thermo,
}
