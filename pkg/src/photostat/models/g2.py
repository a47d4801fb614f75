"""Pulsed-excitation coincidence train.

    C2(tau) = B + N * sum_n (1 - delta_{0n} / m) * exp(-|tau - n * period| / t1)

Times are in ns. The infinite sum is evaluated over the peaks nearest to tau;
peaks further than ``n_extra`` periods away are dropped, with ``n_extra``
chosen so they contribute less than 1e-14 relative to the nearest included
side peak.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateData, InvalidConfig
from .lm import LMOptions, levenberg_marquardt
from .result import FitResult

TRUNCATION_LOG = math.log(1e14)


@dataclass
class G2TrainParams:
    background_b: float
    amplitude_n: float
    n_molecules_m: float
    t1: float  # ns
    pulse_period: float = 25.0  # ns

    @property
    def g2_zero(self):
        return 1.0 - 1.0 / self.n_molecules_m


def default_n_extra(t1, period):
    return int(math.ceil(TRUNCATION_LOG * t1 / period)) + 1


def _peaks(tau, t1, period, n_extra=None):
    """Peak indices, |tau - n*period| and exp terms over the truncation window."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if n_extra is None:
        n_extra = default_n_extra(t1, period)
    k0 = np.floor(tau / period)
    n = k0[:, None] + np.arange(-n_extra, n_extra + 2)[None, :]
    signed = tau[:, None] - n * period
    dist = np.abs(signed)
    e = np.exp(-dist / t1)
    return n, signed, dist, e


def _train_terms(tau, t1, period, n_extra=None):
    n, signed, dist, e = _peaks(tau, t1, period, n_extra)
    central = np.where(n == 0, e, 0.0).sum(axis=1)
    return n, signed, dist, e, central


def eval_g2_train(tau, p, n_extra=None):
    """Model counts per bin at delays ``tau`` (ns)."""
    scalar = np.ndim(tau) == 0
    n, _, _, e, _ = _train_terms(tau, p.t1, p.pulse_period, n_extra)
    weight = np.where(n == 0, 1.0 - 1.0 / p.n_molecules_m, 1.0)
    out = p.background_b + p.amplitude_n * (weight * e).sum(axis=1)
    return float(out[0]) if scalar else out


def g2_train_jacobian(tau, p, include_period=False):
    """d model / d (B, N, m, t1[, period]) at ``tau`` (ns)."""
    n, signed, dist, e, central = _train_terms(tau, p.t1, p.pulse_period)
    m, t1, amp = p.n_molecules_m, p.t1, p.amplitude_n
    weight = np.where(n == 0, 1.0 - 1.0 / m, 1.0)
    cols = [
        np.ones(len(central)),
        (weight * e).sum(axis=1),
        amp * central / m**2,
        amp * (weight * e * dist).sum(axis=1) / t1**2,
    ]
    if include_period:
        cols.append(amp * (weight * e * np.sign(signed) * n).sum(axis=1) / t1)
    return np.column_stack(cols)


def g2_train_direct(tau, p, n_terms=200):
    """Plain summation over ``n_terms`` peaks centred on n = 0 (reference)."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    half = n_terms // 2
    total = np.zeros_like(tau)
    for n in range(-half, half + 1):
        w = (1.0 - 1.0 / p.n_molecules_m) if n == 0 else 1.0
        total += w * np.exp(-np.abs(tau - n * p.pulse_period) / p.t1)
    return p.background_b + p.amplitude_n * total


def initial_guess(tau, counts, period, bin_width):
    """Data-driven starting point (B, N, m, t1) from the peak structure."""
    tau = np.asarray(tau, float)
    c = np.asarray(counts, float)
    phase = np.mod(tau / period, 1.0)
    between = np.abs(phase - 0.5) < 0.1
    b0 = float(np.median(c[between])) if between.any() else float(np.min(c))

    def near(center, half):
        return np.abs(tau - center) <= half

    heights, widths = [], []
    for k in (-1, 1):
        core = near(k * period, 1.5 * bin_width)
        if not core.any():
            continue
        h = float(c[core].mean()) - b0
        heights.append(h)
        region = near(k * period, 0.5 * period)
        if h > 0:
            widths.append(np.count_nonzero(c[region] - b0 >= h / 2) * bin_width)
    n0 = max(float(np.mean(heights)) if heights else 0.0, 0.0)
    if n0 > 0 and widths:
        t1 = float(np.mean(widths)) / (2 * math.log(2))
        t1 = min(max(t1, bin_width), period / 2)
    else:
        t1 = period / 6
    if n0 > 0:
        # the midpoints still carry the tails of both neighbouring peaks
        q = math.exp(-period / t1)
        tails = 2 * n0 * math.exp(-period / (2 * t1)) / (1 - q)
        b0 = max(b0 - tails, 0.0)
        n0 += tails - 2 * n0 * q / (1 - q)
    core0 = near(0.0, 1.5 * bin_width)
    if n0 > 0 and core0.any():
        ratio = (float(c[core0].mean()) - b0) / n0
        inv_m = min(max(1.0 - ratio, 0.01), 0.99)
    else:
        inv_m = 0.5
    return G2TrainParams(b0, n0, 1.0 / inv_m, t1, period)


def fit_g2(hist, pulse_period=25.0, init=None, fit_period=False, options=None):
    """Poisson-weighted fit of the pulse-train model to a coincidence histogram.

    Internally the fit works with ``1/m`` (bounded to [0, 1]) so the central
    peak height enters linearly; m and its error are reported by propagation.
    Derived ``g2_zero = 1 - 1/m`` is returned with its error in ``derived``.
    """
    tau = np.asarray(hist.centers, float) / 1000.0
    counts = np.asarray(hist.counts, float)
    bin_ns = hist.bin_width / 1000.0
    if counts.size == 0 or not np.any(counts):
        raise DegenerateData("histogram is empty or all zero")
    if tau.min() > -3 * pulse_period or tau.max() < 3 * pulse_period:
        raise InvalidConfig("histogram must span at least 3 pulse periods either side of tau = 0")
    p0 = init or initial_guess(tau, counts, pulse_period, bin_ns)
    sigma = np.sqrt(np.maximum(counts, 1.0))

    def unpack(x):
        period = x[4] if fit_period else pulse_period
        inv_m = x[2]
        m = 1.0 / inv_m if inv_m > 0 else np.inf
        return G2TrainParams(x[0], x[1], m, x[3], period)

    def model(x):
        return eval_g2_train(tau, unpack(x))

    def jac(x):
        p = unpack(x)
        inv_m = x[2]
        n, signed, dist, e, central = _train_terms(tau, p.t1, p.pulse_period)
        full = e.sum(axis=1)
        cols = [
            np.ones_like(tau),
            full - inv_m * central,
            -x[1] * central,
            x[1] * ((e * dist).sum(axis=1) - inv_m * (np.where(n == 0, e * dist, 0.0)).sum(axis=1)) / p.t1**2,
        ]
        if fit_period:
            weight = np.where(n == 0, 1.0 - inv_m, 1.0)
            cols.append(x[1] * (weight * e * np.sign(signed) * n).sum(axis=1) / p.t1)
        return np.column_stack(cols)

    x0 = [p0.background_b, p0.amplitude_n, 1.0 / p0.n_molecules_m, p0.t1]
    lo = [0.0, 0.0, 0.0, 1e-3 * bin_ns]
    hi = [np.inf, np.inf, 1.0, pulse_period * 10]
    names = ["background_b", "amplitude_n", "inv_m", "t1"]
    if fit_period:
        x0.append(pulse_period)
        lo.append(pulse_period * 0.5)
        hi.append(pulse_period * 1.5)
        names.append("pulse_period")
    raw = levenberg_marquardt(
        model, x0, counts, sigma=sigma, jacobian=jac, bounds=(lo, hi),
        options=options or LMOptions(), names=names,
    )

    # report in (B, N, m, t1[, period]); d m / d(1/m) = -m^2
    x = raw.values
    p = unpack(x)
    t = np.eye(len(x))
    t[2, 2] = -(p.n_molecules_m**2) if np.isfinite(p.n_molecules_m) else np.inf
    with np.errstate(invalid="ignore"):
        cov = t @ raw.covariance @ t.T
    values = x.copy()
    values[2] = p.n_molecules_m
    out_names = ["background_b", "amplitude_n", "n_molecules_m", "t1"] + (["pulse_period"] if fit_period else [])
    res = FitResult(
        params=p,
        names=tuple(out_names),
        values=values,
        covariance=np.nan_to_num(cov, nan=np.inf),
        residual_norm=raw.residual_norm,
        n_iterations=raw.n_iterations,
        converged=raw.converged,
        flags=[f.replace("inv_m", "n_molecules_m") for f in raw.flags],
    )
    inv_m_err = float(np.sqrt(raw.covariance[2, 2])) if raw.covariance[2, 2] >= 0 else np.inf
    res.derived["g2_zero"] = (p.g2_zero, inv_m_err)
    n_err = float(np.sqrt(raw.covariance[1, 1]))
    if p.amplitude_n <= 0 or not np.isfinite(n_err) or p.amplitude_n < 2 * n_err:
        res.flags.append("m_unidentifiable")
    return res


def g2_zero_from_areas(hist, background, pulse_period=25.0, n_side=3):
    """Background-corrected central/side peak area ratio.

    Areas are summed over one period around each peak after subtracting
    ``background`` counts per bin (e.g. the fitted B). Returns the ratio of
    the central area to the mean of ``n_side`` peaks on each side.
    """
    tau = np.asarray(hist.centers, float) / 1000.0
    c = np.asarray(hist.counts, float)

    def area(k):
        sel = np.abs(tau - k * pulse_period) < pulse_period / 2
        return float(c[sel].sum() - background * np.count_nonzero(sel))

    side = [area(k) for k in range(-n_side, n_side + 1) if k != 0]
    return area(0) / float(np.mean(side))
