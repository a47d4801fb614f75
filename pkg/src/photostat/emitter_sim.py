"""Monte Carlo detector-click streams from fluorescent molecules.

Each molecule is simulated as a sequence of excitations. Only excitations
with a consequence are drawn explicitly: those that bleach the molecule,
shelve it in the triplet, or yield a detected photon. The gaps between
them are geometric in pulses (pulsed mode) or exponential in time (CW mode),
so long, low-efficiency acquisitions cost time proportional to the number of
clicks rather than the number of pulses.

Random sub-streams (see :func:`photostat.core.make_rng`):

* ``(0, i)``: molecule ``i`` (gaps, outcomes, emission delays, routing, triplet dwell)
* ``(1, d, s)``: dark counts of detector ``d`` in chunk ``s``
* ``(2,)``: bleach times in :func:`simulate_bleaching_survival`
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import PS_PER_NS, PS_PER_S, PS_PER_US, RNG_NAME, AcquisitionMeta, TimeTagStream, make_rng
from .errors import InvalidConfig
from .models.survival import SurvivalCurve

log = logging.getLogger(__name__)

BATCH = 1 << 15
BLEACH, SHELVE, DETECT = 0, 1, 2


@dataclass
class MoleculePhotophysics:
    t1: float = 4.23  # ns
    dipole_angle_deg: float = 0.0
    isc_yield: float = 0.0  # shelving is off unless both this and triplet_lifetime are set
    triplet_lifetime: float | None = None  # us; None disables shelving
    bleach_prob_per_excitation: float = 0.0
    brightness: float = 1.0

    def validate(self):
        if not self.t1 > 0:
            raise InvalidConfig(f"t1 must be positive, got {self.t1}")
        if not 0 <= self.isc_yield <= 1:
            raise InvalidConfig("isc_yield must lie in [0, 1]")
        if not 0 <= self.bleach_prob_per_excitation <= 1:
            raise InvalidConfig("bleach_prob_per_excitation must lie in [0, 1]")
        if not self.brightness > 0:
            raise InvalidConfig("brightness must be positive")
        if self.triplet_lifetime is not None and not self.triplet_lifetime > 0:
            raise InvalidConfig("triplet_lifetime must be positive when given")


@dataclass
class ExcitationConfig:
    mode: str = "pulsed"
    pulse_period: float = 25.0  # ns
    excitation_prob_per_pulse: float = 0.1
    intensity: float = 0.0  # kW/cm^2
    i_sat: float = 75.0  # kW/cm^2

    def validate(self, t1_values=()):
        if self.mode == "pulsed":
            if not 0 < self.excitation_prob_per_pulse <= 1:
                raise InvalidConfig("excitation_prob_per_pulse must lie in (0, 1]")
            if not self.pulse_period > 0:
                raise InvalidConfig("pulse_period must be positive")
            for t1 in t1_values:
                if self.pulse_period < 3 * t1:
                    warnings.warn(
                        f"pulse_period {self.pulse_period} ns is shorter than 3*t1 ({3 * t1} ns); "
                        "emission from consecutive pulses overlaps",
                        stacklevel=3,
                    )
                    break
        elif self.mode == "cw":
            if not self.intensity >= 0:
                raise InvalidConfig("intensity must be >= 0")
            if not self.i_sat > 0:
                raise InvalidConfig("i_sat must be positive")
        else:
            raise InvalidConfig(f"unknown excitation mode {self.mode!r}")

    def excitation_rate(self, t1):
        """Mean excitations per second for a molecule with lifetime ``t1`` (ns)."""
        if self.mode == "pulsed":
            return self.excitation_prob_per_pulse / (self.pulse_period * 1e-9)
        return cw_scattering_rate(self.intensity, self.i_sat, t1)


@dataclass
class DetectionConfig:
    efficiency: float = 0.01875
    split_ratio: float = 0.5
    dark_rate_per_detector: float = 0.0  # counts/s

    def validate(self):
        if not 0 <= self.efficiency <= 1:
            raise InvalidConfig("efficiency must lie in [0, 1]")
        if not 0 < self.split_ratio < 1:
            raise InvalidConfig("split_ratio must lie in (0, 1)")
        if not self.dark_rate_per_detector >= 0:
            raise InvalidConfig("dark_rate_per_detector must be >= 0")


@dataclass
class EmitterEnsemble:
    molecules: list = field(default_factory=list)
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    duration: float = 1.0  # s
    seed: int = 0
    chunk_duration: float = 1.0  # s, simulation granularity; part of the reproducibility key

    def validate(self):
        for m in self.molecules:
            m.validate()
        self.excitation.validate([m.t1 for m in self.molecules])
        self.detection.validate()
        if not self.duration >= 0:
            raise InvalidConfig("duration must be >= 0")
        if not self.chunk_duration > 0:
            raise InvalidConfig("chunk_duration must be positive")
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                molecules=[MoleculePhotophysics(**m) for m in d.get("molecules", [])],
                excitation=ExcitationConfig(**d.get("excitation", {})),
                detection=DetectionConfig(**d.get("detection", {})),
                duration=float(d.get("duration", 1.0)),
                seed=int(d.get("seed", 0)),
                chunk_duration=float(d.get("chunk_duration", 1.0)),
            )
        except TypeError as exc:
            raise InvalidConfig(f"bad ensemble config: {exc}") from exc


def cw_scattering_rate(intensity, i_sat, t1):
    """Excitations per second under CW drive: (1 / (2 t1)) * I / (I + I_sat), t1 in ns."""
    i = np.asarray(intensity, dtype=float)
    return (1.0 / (2.0 * t1 * 1e-9)) * i / (i + i_sat)


def photon_budget(intensity, i_sat, t1, exposure):
    """Mean number of excitations during ``exposure`` seconds of CW drive."""
    return exposure * cw_scattering_rate(intensity, i_sat, t1)


class _Track:
    """Event generator for one molecule; see the module docstring."""

    def __init__(self, mol, exc, det, rng):
        self.rng = rng
        self.pulsed = exc.mode == "pulsed"
        self.period_ps = int(round(exc.pulse_period * PS_PER_NS)) if self.pulsed else 0
        self.t1_ps = mol.t1 * PS_PER_NS
        eta = min(1.0, det.efficiency * mol.brightness)
        qb = mol.bleach_prob_per_excitation
        isc = mol.isc_yield if mol.triplet_lifetime is not None else 0.0
        self.triplet_ps = (mol.triplet_lifetime or 0.0) * PS_PER_US
        self.split = det.split_ratio
        probs = np.array([qb, (1 - qb) * isc, (1 - qb) * (1 - isc) * eta])
        self.r = float(probs.sum())
        self.cum = np.cumsum(probs / self.r) if self.r > 0 else None
        if self.pulsed:
            self.p_event = exc.excitation_prob_per_pulse * self.r
            self.base = -1  # last consumed pulse index
        else:
            rate = float(cw_scattering_rate(exc.intensity, exc.i_sat, mol.t1)) * self.r / PS_PER_S
            self.mean_gap = 1.0 / rate if rate > 0 else math.inf
            self.base = 0.0  # last consumed time (ps)
        self.dead = self.r == 0 or (not self.pulsed and not math.isfinite(self.mean_gap))
        self.bleach_time = None
        self.n_shelved = 0
        self._ptr = BATCH

    def _refill(self):
        g = self.rng
        if self.pulsed:
            self.gaps = g.geometric(self.p_event, BATCH).astype(np.int64)
        else:
            self.gaps = g.exponential(self.mean_gap, BATCH)
        self.kind = np.searchsorted(self.cum, g.random(BATCH), side="right").clip(0, 2)
        self.delay = g.exponential(self.t1_ps, BATCH)
        self.route = g.random(BATCH)
        self.dwell = g.exponential(self.triplet_ps, BATCH) if self.triplet_ps > 0 else np.zeros(BATCH)
        self._ptr = 0

    def _to_time(self, pos):
        return pos * self.period_ps if self.pulsed else pos

    def run_until(self, t_end):
        """Detected photons from excitations before ``t_end`` ps: (times, channels)."""
        times, chans = [], []
        while not self.dead and self.bleach_time is None:
            if self._ptr >= BATCH:
                self._refill()
            i = self._ptr
            kind = self.kind[i:]
            special = np.flatnonzero(kind != DETECT)
            seg = special[0] + 1 if special.size else kind.size
            pos = self.base + np.cumsum(self.gaps[i:i + seg])
            t_exc = self._to_time(pos)
            stop = int(np.searchsorted(t_exc, t_end, side="left"))
            n_det = min(stop, seg - 1 if special.size else seg)
            if n_det:
                sl = slice(i, i + n_det)
                times.append(np.floor(t_exc[:n_det] + self.delay[sl]).astype(np.int64))
                chans.append((self.route[sl] >= self.split).astype(np.uint8))
            if stop < seg:
                if stop:
                    self.base = pos[stop - 1]
                    self._ptr = i + stop
                break
            self._ptr = i + seg
            self.base = pos[-1]
            if special.size:
                k = i + seg - 1
                if self.kind[k] == BLEACH:
                    self.bleach_time = float(t_exc[-1])
                else:
                    self.n_shelved += 1
                    wake = float(t_exc[-1]) + self.dwell[k]
                    if self.pulsed:
                        self.base = max(pos[-1], math.ceil(wake / self.period_ps) - 1)
                    else:
                        self.base = wake
        if not times:
            return np.empty(0, np.int64), np.empty(0, np.uint8)
        return np.concatenate(times), np.concatenate(chans)


@dataclass
class SimulationReport:
    """Ground truth alongside a simulated stream."""

    bleach_times_ps: list
    n_shelved: list
    n_dark: list


def _chunk_bounds(ensemble):
    total_ps = int(round(ensemble.duration * PS_PER_S))
    step_ps = int(round(ensemble.chunk_duration * PS_PER_S))
    edges = list(range(0, total_ps, step_ps)) + [total_ps]
    if len(edges) == 1:
        edges = [0, 0]
    return total_ps, list(zip(edges[:-1], edges[1:]))


def acquisition_meta(ensemble):
    exc = ensemble.excitation
    return AcquisitionMeta(
        duration=float(ensemble.duration),
        pulse_period=float(exc.pulse_period * PS_PER_NS) if exc.mode == "pulsed" else 0.0,
        seed=int(ensemble.seed),
        notes=f"rng={RNG_NAME}; substreams molecule=(0,i) dark=(1,detector,chunk); "
        f"chunk_duration={ensemble.chunk_duration}s",
    )


def iter_stream_chunks(ensemble, report=None):
    """Yield the simulated stream as consecutive time-ordered chunks.

    Concatenating the chunks gives exactly :func:`simulate_stream`'s output.
    ``report`` (a :class:`SimulationReport`) is filled in when given.
    """
    ensemble.validate()
    det = ensemble.detection
    tracks = [
        _Track(m, ensemble.excitation, det, make_rng(ensemble.seed, 0, i))
        for i, m in enumerate(ensemble.molecules)
    ]
    n_mol = len(tracks)
    total_ps, chunks = _chunk_bounds(ensemble)
    meta = acquisition_meta(ensemble)
    pend_t = np.empty(0, np.int64)
    pend_c = np.empty(0, np.uint8)
    pend_s = np.empty(0, np.int64)
    n_dark = [0, 0]
    for s, (lo, hi) in enumerate(chunks):
        parts_t, parts_c, parts_s = [pend_t], [pend_c], [pend_s]
        for i, tr in enumerate(tracks):
            t, c = tr.run_until(hi)
            parts_t.append(t)
            parts_c.append(c)
            parts_s.append(np.full(t.size, i, np.int64))
        for d in (0, 1):
            rate = det.dark_rate_per_detector
            if rate > 0 and hi > lo:
                g = make_rng(ensemble.seed, 1, d, s)
                k = g.poisson(rate * (hi - lo) / PS_PER_S)
                t = np.floor(lo + g.random(k) * (hi - lo)).astype(np.int64)
                n_dark[d] += k
                parts_t.append(t)
                parts_c.append(np.full(k, d, np.uint8))
                parts_s.append(np.full(k, n_mol + d, np.int64))
        t = np.concatenate(parts_t)
        c = np.concatenate(parts_c)
        src = np.concatenate(parts_s)
        keep = t <= total_ps
        t, c, src = t[keep], c[keep], src[keep]
        order = np.lexsort((src, c, t))
        t, c, src = t[order], c[order], src[order]
        last = s == len(chunks) - 1
        cut = t.size if last else int(np.searchsorted(t, hi, side="left"))
        pend_t, pend_c, pend_s = t[cut:], c[cut:], src[cut:]
        yield TimeTagStream(c[:cut], t[:cut], meta)
    if report is not None:
        report.bleach_times_ps = [tr.bleach_time for tr in tracks]
        report.n_shelved = [tr.n_shelved for tr in tracks]
        report.n_dark = n_dark


def simulate_detailed(ensemble):
    report = SimulationReport([], [], [0, 0])
    chunks = list(iter_stream_chunks(ensemble, report))
    ch = np.concatenate([c.channels for c in chunks]) if chunks else np.empty(0, np.uint8)
    t = np.concatenate([c.times for c in chunks]) if chunks else np.empty(0, np.int64)
    return TimeTagStream(ch, t, acquisition_meta(ensemble)), report


def simulate_stream(ensemble):
    """Merged, time-sorted click stream for ``ensemble`` (deterministic per seed)."""
    return simulate_detailed(ensemble)[0]


def simulate_bleaching_survival(population, excitation, checkpoints, seed=0):
    """Unbleached molecule counts at each checkpoint (s).

    Each molecule bleaches after an exponential time with rate
    ``excitation_rate * bleach_prob_per_excitation``.
    """
    cps = np.asarray(checkpoints, dtype=float)
    if cps.ndim != 1 or np.any(np.diff(cps) < 0):
        raise InvalidConfig("checkpoints must be sorted ascending")
    for m in population:
        m.validate()
    excitation.validate()
    rng = make_rng(seed, 2)
    rates = np.array([excitation.excitation_rate(m.t1) * m.bleach_prob_per_excitation for m in population])
    with np.errstate(divide="ignore"):
        scale = np.where(rates > 0, 1.0 / np.where(rates > 0, rates, 1.0), np.inf)
    u = rng.exponential(1.0, len(population))
    t_bleach = u * scale
    counts = (t_bleach[None, :] > cps[:, None]).sum(axis=1)
    return SurvivalCurve(cps, counts, len(population))


def molecules_with_bleach_lifetime(n, lifetime_s, excitation, t1=4.23):
    """``n`` molecules whose mean survival time under ``excitation`` is ``lifetime_s``."""
    rate = excitation.excitation_rate(t1)
    q = 0.0 if not math.isfinite(lifetime_s) else 1.0 / (lifetime_s * rate)
    if q > 1:
        raise InvalidConfig("lifetime too short for this excitation rate")
    return [MoleculePhotophysics(t1=t1, bleach_prob_per_excitation=q) for _ in range(n)]


def fig7_ensemble(duration=1800.0, seed=1, rate_per_detector=4e4, dark_rate=2500.0,
                  excitation_prob=0.1, t1=4.23, pulse_period=25.0, n_molecules=1):
    """Single-molecule pulsed HBT acquisition tuned to ``rate_per_detector`` clicks/s.

    Only the product excitation_prob * efficiency is constrained by the rate;
    ``excitation_prob`` picks one member of that family.
    """
    signal = rate_per_detector - dark_rate
    if signal <= 0:
        raise InvalidConfig("dark rate exceeds target rate")
    split = 0.5
    eff = signal * pulse_period * 1e-9 / (excitation_prob * split * n_molecules)
    return EmitterEnsemble(
        molecules=[MoleculePhotophysics(t1=t1) for _ in range(n_molecules)],
        excitation=ExcitationConfig("pulsed", pulse_period, excitation_prob),
        detection=DetectionConfig(eff, split, dark_rate),
        duration=duration,
        seed=seed,
    )
