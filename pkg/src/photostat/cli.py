"""Command-line entry point: ``photostat <command> [<subcommand>] [options]``.

Exit codes: 0 success, 1 usage error (help is printed), 2 computation or
data error (a JSON error object is printed to stderr and written beside
the requested output when there is one).

Outputs go to ``--out``; when it is omitted they go to the directory named
by ``PHOTOSTAT_OUTDIR`` (default: the current directory). Every output is
accompanied by a ``*.manifest.json`` (or ``manifest.json`` for directory
outputs) recording the resolved arguments, seed, inputs and tool version.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, imaging, recipes, thermo
from .core import load_json, read_timetags, write_json, write_timetag_chunks
from .correlator import correlate_stream, read_histogram, symmetric_window, write_histogram
from .emitter_sim import EmitterEnsemble, acquisition_meta, iter_stream_chunks
from .errors import PhotostatError
from .models.g2 import fit_g2
from .models.polarization import fit_polarization
from .models.saturation import fit_saturation
from .models.survival import VARIANT_ALIASES, read_survival_csv, fit_survival

log = logging.getLogger("photostat")

OUTDIR_ENV = "PHOTOSTAT_OUTDIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(1, f"\n{self.prog}: error: {message}\n")


def _default_out(name):
    return Path(os.environ.get(OUTDIR_ENV, ".")) / name


def _common(p, out_default, formats, format_default, seed_help="random seed"):
    p.add_argument("--seed", type=int, default=None, help=seed_help + " (overrides any seed in a config file)")
    p.add_argument("--out", type=Path, default=None,
                   help=f"output path (default: ${OUTDIR_ENV}/{out_default})")
    p.add_argument("--format", choices=formats, default=format_default, help="output file format")
    p.set_defaults(out_default=out_default)


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    top = _Parser(prog="photostat", description="Single-molecule photon statistics toolkit.", formatter_class=fmt)
    top.add_argument("--version", action="version", version=f"photostat {__version__}")
    top.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = top.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="simulate a detector click stream", formatter_class=fmt,
                       description="Monte Carlo click stream from an ensemble JSON file.")
    p.add_argument("--config", type=Path, default=None,
                   help="ensemble JSON (default: bundled single-molecule pulsed acquisition)")
    p.add_argument("--duration", type=float, default=None, help="override acquisition duration in s")
    _common(p, "stream.bin", ["binary", "csv"], "binary")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correlate", help="coincidence histogram of a click stream", formatter_class=fmt,
                       description="Full start-stop cross-correlation of channel 1 against channel 0.")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="time-tag file")
    p.add_argument("--in-format", choices=["binary", "csv"], default="binary", help="time-tag file format")
    p.add_argument("--bin-ps", type=float, default=106.9, help="bin width in ps")
    p.add_argument("--window-ns", type=float, default=150.0, help="half-width of the delay window in ns")
    p.add_argument("--partitions", type=int, default=1, help="worker threads")
    _common(p, "hist.csv", ["csv"], "csv", seed_help="unused; accepted for uniformity")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("fit", help="fit a model to measured or simulated data", formatter_class=fmt)
    fsub = p.add_subparsers(dest="model", metavar="model", parser_class=_Parser)
    fsub.required = True
    q = fsub.add_parser("g2", help="pulsed antibunching train", formatter_class=fmt)
    q.add_argument("--hist", type=Path, required=True, help="histogram CSV (tau_ps,counts)")
    q.add_argument("--pulse-ns", type=float, default=25.0, help="pulse period in ns")
    q.add_argument("--fit-period", action="store_true", help="also fit the pulse period")
    _common(q, "fit_g2.json", ["json", "csv"], "json", seed_help="unused; accepted for uniformity")
    q.set_defaults(func=cmd_fit_g2)
    q = fsub.add_parser("saturation", help="rate vs intensity", formatter_class=fmt)
    q.add_argument("--points", type=Path, default=None,
                   help="CSV intensity_kw_cm2,rate_cps[,sigma_cps] (default: bundled sat75.csv)")
    _common(q, "fit_saturation.json", ["json", "csv"], "json", seed_help="unused; accepted for uniformity")
    q.set_defaults(func=cmd_fit_saturation)
    q = fsub.add_parser("polarization", help="intensity vs polarizer angle", formatter_class=fmt)
    q.add_argument("--points", type=Path, required=True, help="CSV angle_deg,intensity")
    _common(q, "fit_polarization.json", ["json", "csv"], "json", seed_help="unused; accepted for uniformity")
    q.set_defaults(func=cmd_fit_polarization)
    q = fsub.add_parser("survival", help="photobleaching survival curve", formatter_class=fmt)
    q.add_argument("--curve", type=Path, required=True, help="CSV time_s,survivors")
    q.add_argument("--model", choices=sorted(VARIANT_ALIASES), default="single", help="survival law")
    _common(q, "fit_survival.json", ["json", "csv"], "json", seed_help="unused; accepted for uniformity")
    q.set_defaults(func=cmd_fit_survival)

    p = sub.add_parser("thermo", help="vapour-growth thermodynamics", formatter_class=fmt)
    tsub = p.add_subparsers(dest="action", metavar="action", parser_class=_Parser)
    tsub.required = True
    for name, helptext in (("report", "single scenario"), ("sweep", "scan the bottom temperature")):
        q = tsub.add_parser(name, help=helptext, formatter_class=fmt)
        if name == "report":
            q.add_argument("--tb", required=True, help="bottom temperature, e.g. 243C or 516K")
        else:
            q.add_argument("--tb-range", default="130C:260C:1C", help="start:stop:step, stop inclusive")
        q.add_argument("--tt", default="25C", help="top temperature")
        q.add_argument("--correlation", required=True, choices=sorted(thermo.PRESETS),
                       help="vapour-pressure preset")
        q.add_argument("--sigma", type=float, default=None if name == "report" else 2.6,
                       help="substrate interface energy in meV/A^2")
        q.add_argument("--ab", type=float, default=thermo.UNIT_CELL_AB, help="unit-cell area in A^2")
        q.add_argument("--gamma", type=float, default=thermo.GAMMA_001, help="surface energy in meV/A^2")
        if name == "report":
            _common(q, "thermo_report.json", ["json"], "json", seed_help="unused; accepted for uniformity")
            q.set_defaults(func=cmd_thermo_report)
        else:
            _common(q, "thermo_sweep.csv", ["csv"], "csv", seed_help="unused; accepted for uniformity")
            q.set_defaults(func=cmd_thermo_sweep)

    p = sub.add_parser("scan", help="synthetic confocal scans", formatter_class=fmt)
    ssub = p.add_subparsers(dest="action", metavar="action", parser_class=_Parser)
    ssub.required = True
    q = ssub.add_parser("render", help="render one scan image", formatter_class=fmt)
    q.add_argument("--layout", type=Path, default=None, help="emitter layout JSON (default: random layout)")
    q.add_argument("--config", type=Path, default=None, help="scan config JSON (default: 16 um, 200 px, 400 nm)")
    q.add_argument("--angle", type=float, default=None, help="polarizer angle in degrees (overrides config)")
    _common(q, "image.csv", ["csv"], "csv")
    q.set_defaults(func=cmd_scan_render)
    q = ssub.add_parser("detect", help="find spots in an image", formatter_class=fmt)
    q.add_argument("--image", type=Path, required=True, help="image CSV (geometry from its JSON sidecar)")
    q.add_argument("--config", type=Path, default=None, help="scan config JSON if the image has no sidecar")
    q.add_argument("--threshold", type=float, default=5.0, help="detection threshold in background sd")
    _common(q, "spots.json", ["json"], "json", seed_help="unused; accepted for uniformity")
    q.set_defaults(func=cmd_scan_detect)
    q = ssub.add_parser("polarize", help="render an angle series, extract and fit each spot", formatter_class=fmt)
    q.add_argument("--layout", type=Path, default=None, help="emitter layout JSON (default: random layout)")
    q.add_argument("--config", type=Path, default=None, help="scan config JSON")
    q.add_argument("--angles", default="0:180:15", help="start:stop:step in degrees, stop exclusive")
    q.add_argument("--threshold", type=float, default=5.0, help="detection threshold in background sd")
    _common(q, "series.csv", ["csv"], "csv")
    q.set_defaults(func=cmd_scan_polarize)

    p = sub.add_parser("reproduce", help="end-to-end figure recipes", formatter_class=fmt)
    rsub = p.add_subparsers(dest="recipe", metavar="recipe", parser_class=_Parser)
    rsub.required = True
    q = rsub.add_parser("fig7", help="antibunching pipeline: simulate, correlate, fit", formatter_class=fmt)
    q.add_argument("--duration", type=float, default=1800.0, help="acquisition time in s")
    q.add_argument("--write-stream", action="store_true", help="also write the click stream (about 2.3 GB for 30 min)")
    _common(q, "fig7", ["binary", "csv"], "binary")
    q.set_defaults(func=cmd_reproduce)
    q = rsub.add_parser("fig8", help="saturation fit", formatter_class=fmt)
    q.add_argument("--noise", type=float, default=0.02, help="relative noise for seeds other than 0")
    _common(q, "fig8", ["json"], "json", seed_help="0 selects the bundled data set, others synthesise new points")
    q.set_defaults(func=cmd_reproduce)
    q = rsub.add_parser("fig6", help="polarization batch over synthetic crystals", formatter_class=fmt)
    q.add_argument("--molecules", type=int, default=58, help="number of molecules")
    q.add_argument("--crystals", type=int, default=12, help="number of crystals")
    q.add_argument("--spread-deg", type=float, default=3.0, help="intrinsic orientation sd in degrees")
    _common(q, "fig6", ["json"], "json")
    q.set_defaults(func=cmd_reproduce)
    q = rsub.add_parser("fig9", help="photobleaching survival", formatter_class=fmt)
    q.add_argument("--n-seeds", type=int, default=100, help="population replicas")
    _common(q, "fig9", ["json"], "json")
    q.set_defaults(func=cmd_reproduce)
    q = rsub.add_parser("sec2-thermo", help="substrate energy and morphology sweep", formatter_class=fmt)
    q.add_argument("--delta-mu", type=float, default=410.0, help="measured drive in meV")
    q.add_argument("--delta-mu-err", type=float, default=20.0, help="its uncertainty in meV")
    q.add_argument("--tb-range", default="130C:260C:1C", help="bottom temperatures for the sweep")
    _common(q, "sec2-thermo", ["json"], "json", seed_help="unused; accepted for uniformity")
    q.set_defaults(func=cmd_reproduce)
    return top


def _out(args):
    return args.out if args.out is not None else _default_out(args.out_default)


def _seed(args, default=0):
    return default if args.seed is None else args.seed


def _write_result(res, path, fmt):
    if fmt == "json":
        write_json(res.to_dict(), path)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    errs = res.stderr
    with open(path, "w") as fh:
        fh.write("name,value,error\n")
        for n, v, e in zip(res.names, res.values, errs):
            fh.write(f"{n},{float(v)!r},{float(e)!r}\n")
        for n, (v, e) in res.derived.items():
            fh.write(f"{n},{float(v)!r},{float(e)!r}\n")


def cmd_simulate(args):
    cfg = load_json(args.config) if args.config else load_json(recipes.bundled("ensemble_fig7.json"))
    ens = EmitterEnsemble.from_dict(cfg)
    if args.seed is not None:
        ens.seed = args.seed
    if args.duration is not None:
        ens.duration = args.duration
    out = _out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_timetag_chunks(iter_stream_chunks(ens), out, acquisition_meta(ens), args.format)
    log.info("wrote %d clicks to %s", n, out)
    return out, {"ensemble": ens.to_dict(), "n_records": n}


def cmd_correlate(args):
    stream = read_timetags(args.inp, args.in_format)
    window = symmetric_window(args.window_ns * 1000.0, args.bin_ps)
    hist = correlate_stream(stream, args.bin_ps, window, args.partitions)
    out = _out(args)
    write_histogram(hist, out)
    return out, {"n_bins": hist.n_bins, "total_starts": hist.total_starts, "total_stops": hist.total_stops}


def cmd_fit_g2(args):
    hist = read_histogram(args.hist)
    res = fit_g2(hist, pulse_period=args.pulse_ns, fit_period=args.fit_period)
    out = _out(args)
    _write_result(res, out, args.format)
    return out, {"converged": res.converged}


def cmd_fit_saturation(args):
    pts = recipes.read_table(args.points or recipes.bundled("sat75.csv"))
    res = fit_saturation(pts)
    out = _out(args)
    _write_result(res, out, args.format)
    return out, {"converged": res.converged}


def cmd_fit_polarization(args):
    res = fit_polarization(recipes.read_table(args.points))
    out = _out(args)
    _write_result(res, out, args.format)
    return out, {"converged": res.converged}


def cmd_fit_survival(args):
    res = fit_survival(read_survival_csv(args.curve), args.model)
    out = _out(args)
    _write_result(res, out, args.format)
    return out, {"converged": res.converged}


def _scenario(args, t_bottom):
    return thermo.ThermoScenario(
        t_bottom=t_bottom,
        correlation=args.correlation,
        t_top=thermo.parse_temperature(args.tt),
        unit_cell_ab=args.ab,
        gamma_001=args.gamma,
        sigma_substrate=args.sigma,
    )


def cmd_thermo_report(args):
    rep = thermo.thermo_report(_scenario(args, thermo.parse_temperature(args.tb)))
    out = _out(args)
    write_json(rep.to_dict(), out)
    return out, {"delta_mu": rep.delta_mu, "predicted_morphology": rep.predicted_morphology}


def cmd_thermo_sweep(args):
    tbs = thermo.parse_temperature_range(args.tb_range)
    reports = [thermo.thermo_report(_scenario(args, float(t))) for t in tbs]
    out = _out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    recipes.write_sweep_csv(reports, out)
    return out, {"n_rows": len(reports)}


def _scan_inputs(args):
    cfg = imaging.ScanConfig.from_dict(load_json(args.config)) if args.config else imaging.ScanConfig()
    if args.seed is not None:
        cfg = imaging.ScanConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    if args.layout:
        layout = imaging.EmitterLayout.from_dict(load_json(args.layout))
    else:
        layout = imaging.random_layout(cfg)
    return cfg, layout


def cmd_scan_render(args):
    cfg, layout = _scan_inputs(args)
    if args.angle is not None:
        cfg = cfg.with_angle(args.angle)
    img = imaging.render_scan(layout, cfg)
    out = _out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    imaging.write_image(img, cfg, out)
    write_json(layout.to_dict(), out.with_name(out.stem + ".layout.json"))
    return out, {"out_of_field": layout.out_of_field(cfg), "n_emitters": len(layout.emitters)}


def cmd_scan_detect(args):
    img, cfg = imaging.read_image(args.image)
    if args.config:
        cfg = imaging.ScanConfig.from_dict(load_json(args.config))
    if cfg is None:
        raise UsageError("image has no sidecar; pass --config")
    spots = imaging.detect_spots(img, cfg, args.threshold)
    out = _out(args)
    write_json({"spots": [s.to_dict() for s in spots]}, out)
    return out, {"n_spots": len(spots)}


def cmd_scan_polarize(args):
    cfg, layout = _scan_inputs(args)
    angles = imaging.angle_grid(args.angles)
    frames = imaging.scan_series(layout, cfg, angles)
    spots = imaging.detect_spots(imaging.detection_image(frames) / len(frames), cfg, args.threshold)
    series = imaging.extract_polarization_series(frames, spots, cfg)
    out = _out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    fits = []
    with open(out, "w") as fh:
        fh.write("spot,x_um,y_um,angle_deg,intensity,raw_signal\n")
        for k, s in enumerate(series):
            for a, v, r in zip(s.angles_deg, s.intensity, s.raw_signal):
                fh.write(f"{k},{float(s.spot.centroid[0])!r},{float(s.spot.centroid[1])!r},{float(a)!r},{float(v)!r},{float(r)!r}\n")
            try:
                res = fit_polarization(s.points())
                fits.append({"spot": k, "flags": s.flags, "fit": res.to_dict()})
            except PhotostatError as exc:
                fits.append({"spot": k, "flags": s.flags + ["fit_failed"], "error": str(exc)})
    write_json({"spots": [s.spot.to_dict() for s in series], "fits": fits}, out.with_name(out.stem + ".fits.json"))
    write_json(layout.to_dict(), out.with_name(out.stem + ".layout.json"))
    return out, {"n_spots": len(series)}


def cmd_reproduce(args):
    out = _out(args)
    seed = args.seed
    if args.recipe == "fig7":
        summary = recipes.fig7(out, seed=1 if seed is None else seed, duration=args.duration,
                               write_stream=args.write_stream, stream_format=args.format)
    elif args.recipe == "fig8":
        summary = recipes.fig8(out, seed=_seed(args), noise=args.noise)
    elif args.recipe == "fig6":
        summary = recipes.fig6(out, seed=_seed(args), n_molecules=args.molecules, n_crystals=args.crystals,
                               spread_deg=args.spread_deg)
    elif args.recipe == "fig9":
        summary = recipes.fig9(out, seed=_seed(args), n_seeds=args.n_seeds)
    else:
        summary = recipes.sec2_thermo(out, args.delta_mu, args.delta_mu_err, t_range=args.tb_range)
    return out, summary


def _manifest_path(out):
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _chain(args):
    return [v for v in (args.command, getattr(args, "model", None), getattr(args, "action", None),
                        getattr(args, "recipe", None)) if v]


def _resolved(args):
    skip = {"func", "out_default", "verbose"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}


def write_manifest(args, argv, out, extra, started, wall):
    inputs = [str(getattr(args, k)) for k in ("config", "inp", "hist", "points", "curve", "image", "layout")
              if getattr(args, k, None) is not None]
    manifest = {
        "tool": "photostat",
        "version": __version__,
        "argv": list(argv),
        "subcommands": _chain(args),
        "arguments": _resolved(args),
        "seed": args.seed,
        "inputs": inputs,
        "output": str(out),
        "started_utc": started,
        "wall_clock_s": wall,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "details": extra,
    }
    write_json(manifest, _manifest_path(out))


def _error_payload(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    partial = getattr(exc, "result", None)
    if partial is not None and hasattr(partial, "to_dict"):
        payload["partial_result"] = partial.to_dict()
    return payload


def run_cli(argv=None):
    """Run with ``argv`` (default ``sys.argv[1:]``); returns the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        out, extra = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"photostat: error: {exc}", file=sys.stderr)
        return 1
    except (PhotostatError, OSError, ValueError, ArithmeticError) as exc:
        payload = _error_payload(exc, 2)
        print(json.dumps(payload, default=str), file=sys.stderr)
        if args.out is not None:
            target = Path(args.out)
            err = target / "error.json" if target.is_dir() else target.with_name(target.name + ".error.json")
            try:
                write_json(payload, err)
            except OSError:
                pass
        return 2
    write_manifest(args, argv, out, extra, started, time.perf_counter() - t0)
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
