"""Excitation-polarization response of a single dipole.

The fitted curve is ``A cos^2(theta + phi) + B``; the normalised curve shown in
polar plots is the same divided by its maximum ``A + B``. The dipole points
along ``theta = -phi`` (mod 180 deg).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateData
from .lm import LMOptions, levenberg_marquardt
from .result import FitResult

DEG = np.pi / 180.0


@dataclass
class PolarizationParams:
    amp_a: float
    offset_b: float
    phase_phi_deg: float

    @property
    def visibility(self):
        denom = self.amp_a + 2 * self.offset_b
        return self.amp_a / denom if denom > 0 else 0.0

    @property
    def dipole_angle_deg(self):
        return float(np.mod(-self.phase_phi_deg, 180.0))


def eval_malus(theta_deg, p):
    th = np.asarray(theta_deg, dtype=float)
    return p.amp_a * np.cos((th + p.phase_phi_deg) * DEG) ** 2 + p.offset_b


def eval_polarization(theta_deg, p):
    """Normalised response ``(A cos^2(theta + phi) + B) / (A + B)``."""
    return eval_malus(theta_deg, p) / (p.amp_a + p.offset_b)


def malus_jacobian(theta_deg, p):
    """d (A cos^2(theta+phi) + B) / d (A, B, phi_deg)."""
    arg = (np.asarray(theta_deg, dtype=float) + p.phase_phi_deg) * DEG
    return np.column_stack([np.cos(arg) ** 2, np.ones_like(arg), -p.amp_a * np.sin(2 * arg) * DEG])


def _canonical(a, b, phi):
    """Fold to A >= 0 and phi in [0, 180)."""
    if a < 0:
        a, b, phi = -a, b + a, phi + 90.0
    return a, b, float(np.mod(phi, 180.0))


def fit_polarization(points, options=None):
    """Least-squares fit of rows (theta_deg, intensity).

    phi starts from the angle of the largest sample. Derived quantities:
    ``visibility`` = A / (A + 2B) and ``dipole_angle_deg`` = -phi mod 180.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] < 2 or len(pts) < 3:
        raise DegenerateData("need rows of (theta_deg, intensity), at least 3")
    th, y = pts[:, 0], pts[:, 1]
    flags = []
    if len(np.unique(np.mod(th, 180.0))) < 6 or np.ptp(th) < 180.0 - 180.0 / len(th) - 1e-9:
        flags.append("sparse_angles")
    a0 = float(np.ptp(y))
    b0 = float(np.min(y))
    phi0 = float(np.mod(-th[np.argmax(y)], 180.0))
    opts = options or LMOptions(scale_covariance=True)

    def model(x):
        return eval_malus(th, PolarizationParams(*x))

    def jac(x):
        return malus_jacobian(th, PolarizationParams(*x))

    raw = levenberg_marquardt(
        model, [a0, b0, phi0], y, jacobian=jac, options=opts, names=["amp_a", "offset_b", "phase_phi_deg"]
    )
    a, b, phi = raw.values
    if a < 0:
        # flipping the sign of A is a reparametrisation: B' = B + A, phi' = phi + 90
        t = np.array([[-1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        raw.covariance = t @ raw.covariance @ t.T
    a, b, phi = _canonical(a, b, phi)
    raw.values = np.array([a, b, phi])
    p = PolarizationParams(a, b, phi)
    raw.params = p
    raw.flags.extend(flags)
    cov = raw.covariance
    sa, sb = np.sqrt(max(cov[0, 0], 0)), np.sqrt(max(cov[1, 1], 0))
    if a <= 0 or not np.isfinite(sa) or a < 3 * sa:
        raw.flags.append("phase_unidentifiable")
    denom = a + 2 * b
    if denom > 0:
        grad = np.array([2 * b / denom**2, -2 * a / denom**2])
        v_err = float(np.sqrt(max(grad @ cov[:2, :2] @ grad, 0))) if np.all(np.isfinite(cov[:2, :2])) else np.inf
    else:
        v_err = np.inf
    raw.derived["visibility"] = (p.visibility, v_err)
    raw.derived["dipole_angle_deg"] = (p.dipole_angle_deg, float(np.sqrt(max(cov[2, 2], 0))))
    return raw


def axial_mean_deg(angles_deg):
    """Mean of axial (period-180) angles, in [0, 180)."""
    a = np.asarray(angles_deg, float) * 2 * DEG
    return float(np.mod(np.arctan2(np.sin(a).sum(), np.cos(a).sum()) / (2 * DEG), 180.0))


def axial_deviation_deg(angles_deg, reference_deg):
    """Signed deviation in [-90, 90) between axial angles."""
    return np.mod(np.asarray(angles_deg, float) - reference_deg + 90.0, 180.0) - 90.0


def orientation_spread(angles_deg, group_ids):
    """Deviation of each angle from its group's axial mean (e.g. per crystal)."""
    angles = np.asarray(angles_deg, float)
    groups = np.asarray(group_ids)
    out = np.empty_like(angles)
    for g in np.unique(groups):
        sel = groups == g
        out[sel] = axial_deviation_deg(angles[sel], axial_mean_deg(angles[sel]))
    return out
