"""Photobleaching survival curves.

Two variants: ``single_exponential`` N0 exp(-t/tau) and
``biexponential_plus_constant`` N1 exp(-t/tau1) + N2 exp(-t/tau2) + C.
Times in seconds.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateData, InvalidConfig
from .lm import LMOptions, levenberg_marquardt
from .result import FitResult

SINGLE = "single_exponential"
BIEXP = "biexponential_plus_constant"
VARIANT_ALIASES = {
    "single": SINGLE,
    "single-exp": SINGLE,
    SINGLE: SINGLE,
    "biexp-const": BIEXP,
    "biexp": BIEXP,
    BIEXP: BIEXP,
}
PARAM_NAMES = {SINGLE: ("n0", "tau"), BIEXP: ("n1", "tau1", "n2", "tau2", "c")}


@dataclass
class SurvivalCurve:
    times: np.ndarray  # s
    counts: np.ndarray
    initial: int = 0

    def rows(self):
        return np.column_stack([self.times, self.counts])


@dataclass
class SurvivalModel:
    variant: str
    params: dict = field(default_factory=dict)

    def __call__(self, t):
        return eval_survival(t, self)


def eval_survival(t, model):
    t = np.asarray(t, dtype=float)
    p = model.params
    if model.variant == SINGLE:
        if not np.isfinite(p["tau"]):
            return np.full_like(t, p["n0"])
        return p["n0"] * np.exp(-t / p["tau"])
    return p["n1"] * np.exp(-t / p["tau1"]) + p["n2"] * np.exp(-t / p["tau2"]) + p["c"]


def _model_vec(variant, t, x):
    if variant == SINGLE:
        return x[0] * np.exp(-t / x[1])
    return x[0] * np.exp(-t / x[1]) + x[2] * np.exp(-t / x[3]) + x[4]


def _jac_vec(variant, t, x):
    if variant == SINGLE:
        e = np.exp(-t / x[1])
        return np.column_stack([e, x[0] * e * t / x[1] ** 2])
    e1, e2 = np.exp(-t / x[1]), np.exp(-t / x[3])
    return np.column_stack([e1, x[0] * e1 * t / x[1] ** 2, e2, x[2] * e2 * t / x[3] ** 2, np.ones_like(t)])


def survival_jacobian(t, model):
    names = PARAM_NAMES[model.variant]
    return _jac_vec(model.variant, np.asarray(t, float), np.array([model.params[k] for k in names]))


def _grid_start(variant, t, y):
    """Best lifetimes on a log grid with amplitudes solved linearly (non-negative)."""
    from scipy.optimize import nnls

    positive = t[t > 0]
    lo = positive.min() / 10 if positive.size else 1e-3
    hi = t.max() * 10 if t.max() > 0 else 1.0
    grid = np.geomspace(lo, hi, 40)
    best, best_x = np.inf, None
    if variant == SINGLE:
        for tau in grid:
            a = np.exp(-t / tau)[:, None]
            coef, rn = nnls(a, y)
            if rn < best:
                best, best_x = rn, [coef[0], tau]
    else:
        for tau1, tau2 in itertools.combinations(grid, 2):
            a = np.column_stack([np.exp(-t / tau1), np.exp(-t / tau2), np.ones_like(t)])
            coef, rn = nnls(a, y)
            if rn < best:
                best, best_x = rn, [coef[0], tau1, coef[1], tau2, coef[2]]
    return np.array(best_x, dtype=float)


def fit_survival(curve, variant=SINGLE, options=None):
    """Unweighted least squares of counts against time for ``variant``.

    A constant curve fitted with the single exponential returns ``tau = inf``
    and the ``lifetime_unidentifiable`` flag.
    """
    variant = VARIANT_ALIASES.get(variant, variant)
    if variant not in PARAM_NAMES:
        raise InvalidConfig(f"unknown survival model {variant!r}")
    t = np.asarray(curve.times, dtype=float)
    y = np.asarray(curve.counts, dtype=float)
    if t.size < 3:
        raise InvalidConfig("need at least 3 checkpoints")
    if np.any(np.diff(y) > 0):
        raise InvalidConfig("survival counts must be non-increasing")
    if not np.any(y > 0):
        raise DegenerateData("no surviving molecules at any checkpoint")
    names = PARAM_NAMES[variant]
    if variant == SINGLE and np.all(y == y[0]):
        res = FitResult(
            params=SurvivalModel(SINGLE, {"n0": float(y[0]), "tau": np.inf}),
            names=names,
            values=np.array([y[0], np.inf]),
            covariance=np.diag([0.0, np.inf]),
            residual_norm=0.0,
            n_iterations=0,
            converged=True,
            flags=["lifetime_unidentifiable"],
        )
        return res
    x0 = _grid_start(variant, t, y)
    span = max(t.max(), 1e-12)
    tau_hi = 1e6 * span
    if variant == SINGLE:
        lo, hi = [0.0, 1e-9 * span], [np.inf, tau_hi]
    else:
        lo, hi = [0.0, 1e-9 * span, 0.0, 1e-9 * span, 0.0], [np.inf, tau_hi, np.inf, tau_hi, np.inf]
    opts = options or LMOptions(scale_covariance=True)
    raw = levenberg_marquardt(
        lambda x: _model_vec(variant, t, x), x0, y,
        jacobian=lambda x: _jac_vec(variant, t, x), bounds=(lo, hi), options=opts, names=names,
    )
    vals = raw.values.copy()
    if variant == BIEXP and vals[1] > vals[3]:
        # order components fast then slow
        perm = [2, 3, 0, 1, 4]
        vals = vals[perm]
        raw.covariance = raw.covariance[np.ix_(perm, perm)]
        raw.values = vals
    tau_idx = [1] if variant == SINGLE else [1, 3]
    for i in tau_idx:
        if vals[i] >= tau_hi * (1 - 1e-9):
            vals[i] = np.inf
            raw.flags.append(f"lifetime_unidentifiable:{names[i]}")
    if variant == BIEXP and t.size < 5:
        raw.flags.append("underdetermined")
    raw.values = vals
    raw.params = SurvivalModel(variant, dict(zip(names, (float(v) for v in vals))))
    return raw


def read_survival_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    counts = data[:, 1]
    return SurvivalCurve(data[:, 0], counts, int(counts.max()) if counts.size else 0)


def write_survival_csv(curve, path):
    with open(path, "w") as fh:
        fh.write("time_s,survivors\n")
        for t, c in zip(curve.times, curve.counts):
            fh.write(f"{float(t)!r},{int(c)}\n")
