"""Saturation of the detected rate: R = R_max * I / (I + I_sat)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateData
from .lm import LMOptions, levenberg_marquardt
from .result import FitResult


@dataclass
class SaturationParams:
    i_sat: float  # kW/cm^2
    r_max: float  # counts/s


def eval_saturation(intensity, p):
    i = np.asarray(intensity, dtype=float)
    return p.r_max * i / (i + p.i_sat)


def saturation_jacobian(intensity, p):
    """d R / d (i_sat, r_max)."""
    i = np.asarray(intensity, dtype=float)
    return np.column_stack([-p.r_max * i / (i + p.i_sat) ** 2, i / (i + p.i_sat)])


def saturation_parameter(intensity, i_sat):
    """s = I / I_sat, which equals Omega^2 * T1 * T2 for a two-level emitter."""
    return np.asarray(intensity, dtype=float) / i_sat


def rabi_frequency(intensity, i_sat, t1, t2):
    """Rabi frequency (rad/ns) from I / I_sat = Omega^2 T1 T2, with T1, T2 in ns."""
    return np.sqrt(saturation_parameter(intensity, i_sat) / (t1 * t2))


def _hanes_guess(i, r):
    """Linear fit of I/R = I/R_max + I_sat/R_max on the positive points."""
    ok = (i > 0) & (r > 0)
    if np.count_nonzero(ok) < 2:
        return SaturationParams(float(np.median(i[i > 0])) if np.any(i > 0) else 1.0, float(r.max()) * 2)
    slope, icept = np.polyfit(i[ok], i[ok] / r[ok], 1)
    if slope <= 0 or icept <= 0:
        return SaturationParams(float(np.median(i[ok])), float(r.max()) * 2)
    return SaturationParams(icept / slope, 1.0 / slope)


def fit_saturation(points, options=None):
    """Weighted fit of (intensity, rate, sigma_rate) triples.

    ``sigma_rate`` may be omitted (two columns), giving an unweighted fit whose
    covariance is scaled by the residual variance.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise DegenerateData("points must be rows of (intensity, rate[, sigma])")
    i, r = pts[:, 0], pts[:, 1]
    sigma = pts[:, 2] if pts.shape[1] == 3 else None
    if len(np.unique(i)) < 3:
        raise DegenerateData("need at least 3 distinct intensities")
    if not np.any(r > 0):
        raise DegenerateData("all rates are zero")
    p0 = _hanes_guess(i, r)
    if not (i.min() < p0.i_sat < i.max()):
        warnings.warn("intensities do not bracket the saturation intensity; I_sat is extrapolated", stacklevel=2)
    opts = options or LMOptions(scale_covariance=sigma is None)

    def model(x):
        return eval_saturation(i, SaturationParams(*x))

    def jac(x):
        return saturation_jacobian(i, SaturationParams(*x))

    raw = levenberg_marquardt(
        model, [p0.i_sat, p0.r_max], r, sigma=sigma, jacobian=jac,
        bounds=([1e-12, 1e-12], [np.inf, np.inf]), options=opts, names=["i_sat", "r_max"],
    )
    raw.params = SaturationParams(*raw.values)
    return raw


def synthetic_saturation_points(i_sat=75.0, r_max=440e3, intensities=None, noise=0.02, seed=0):
    """Rows (intensity, rate, sigma) with Gaussian relative noise."""
    from ..core import make_rng

    if intensities is None:
        intensities = np.geomspace(5.0, 600.0, 12)
    intensities = np.asarray(intensities, dtype=float)
    true = eval_saturation(intensities, SaturationParams(i_sat, r_max))
    sigma = np.maximum(noise * true, 1e-12)
    rate = true + make_rng(seed, 7).normal(0.0, 1.0, true.size) * noise * true
    return np.column_stack([intensities, rate, sigma])
