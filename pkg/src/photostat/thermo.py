"""Vapour-growth thermodynamics of thin anthracene crystals.

Chain: vapour pressure at the hot bottom of the tube -> pressure at the cool
top (ideal gas, sqrt(T_t / T_b) factor) -> chemical potential difference
relative to the crystal at T_t -> comparison with the two-dimensional growth
threshold 2 ab (2 gamma - sigma).

Energies in meV, areas in Angstrom^2, pressures in Pa, temperatures in K.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import constants
from scipy.optimize import brentq

from .errors import InvalidCoefficients, InvalidConfig, NonPositivePressure

K_B = constants.k
MEV = constants.e * 1e-3
HBAR = constants.hbar
R_GAS = constants.R
ANTHRACENE_MOLAR_MASS = 178.23  # g/mol
UNIT_CELL_AB = 51.7  # Angstrom^2, (001) plane
GAMMA_001 = 3.3  # meV/Angstrom^2
T_TOP_DEFAULT = 298.15


@dataclass(frozen=True)
class VaporPressureCorrelation:
    """``antoine``: log10(p/Pa) = A - B / (T + C), coefficients (A, B, C).
    ``clausius_clapeyron``: ln p = ln p_ref - dH/R (1/T - 1/T_ref),
    coefficients (dH [J/mol], p_ref [Pa], T_ref [K]).
    """

    form: str
    coefficients: tuple
    valid_range: tuple  # (T_min, T_max) K
    source_label: str = ""

    def check(self):
        lo, hi = self.valid_range
        if not lo < hi:
            raise InvalidCoefficients("valid_range must be non-empty")
        if self.form == "antoine":
            if len(self.coefficients) != 3 or self.coefficients[1] <= 0:
                raise InvalidCoefficients("antoine needs (A, B > 0, C)")
            if lo + self.coefficients[2] <= 0:
                raise InvalidCoefficients("antoine T + C must stay positive over the valid range")
        elif self.form == "clausius_clapeyron":
            if len(self.coefficients) != 3 or min(self.coefficients) <= 0:
                raise InvalidCoefficients("clausius_clapeyron needs positive (dH, p_ref, T_ref)")
        else:
            raise InvalidCoefficients(f"unknown correlation form {self.form!r}")
        return self

    def in_range(self, t):
        return self.valid_range[0] <= t <= self.valid_range[1]


PRESETS = {
    "antoine-preset-1": VaporPressureCorrelation(
        "antoine",
        (13.8553, 4806.56, -14.005),
        (280.0, 530.0),
        "Antoine fit over 280-530 K to a Kirchhoff-corrected sublimation curve with "
        "dH_sub(298.15 K) = 101 kJ/mol, dCp = -20 J/(mol K), p(298.15 K) = 8.7e-4 Pa",
    ),
    "cc-preset-1": VaporPressureCorrelation(
        "clausius_clapeyron",
        (100.0e3, 8.0e-4, 298.15),
        (280.0, 530.0),
        "Clausius-Clapeyron with constant dH_sub = 100 kJ/mol anchored at p(298.15 K) = 8.0e-4 Pa",
    ),
}


def get_correlation(name_or_corr):
    if isinstance(name_or_corr, VaporPressureCorrelation):
        return name_or_corr
    try:
        return PRESETS[name_or_corr]
    except KeyError:
        raise InvalidConfig(f"unknown correlation {name_or_corr!r}; presets: {sorted(PRESETS)}") from None


def vapor_pressure(t, corr, flags=None):
    """Equilibrium vapour pressure (Pa) at ``t`` K.

    If ``flags`` (a list) is given, an out-of-range evaluation appends a
    message instead of passing silently.
    """
    corr = get_correlation(corr).check()
    if not t > 0:
        raise InvalidConfig(f"temperature must be positive, got {t}")
    if flags is not None and not corr.in_range(t):
        flags.append(f"{corr.form} evaluated at {t:.2f} K outside {corr.valid_range}")
    if corr.form == "antoine":
        a, b, c = corr.coefficients
        return 10.0 ** (a - b / (t + c))
    dh, p_ref, t_ref = corr.coefficients
    return p_ref * math.exp(-dh / R_GAS * (1.0 / t - 1.0 / t_ref))


@dataclass
class ThermoScenario:
    t_bottom: float
    correlation: object  # preset name or VaporPressureCorrelation; no default on purpose
    t_top: float = T_TOP_DEFAULT
    molar_mass: float = ANTHRACENE_MOLAR_MASS
    unit_cell_ab: float = UNIT_CELL_AB
    gamma_001: float = GAMMA_001
    sigma_substrate: float | None = None

    def validate(self):
        if not (self.t_bottom > 0 and self.t_top > 0):
            raise InvalidConfig("temperatures must be positive (K)")
        if not (self.unit_cell_ab > 0 and self.gamma_001 > 0):
            raise InvalidConfig("ab and gamma must be positive")
        get_correlation(self.correlation)
        return self


def top_pressure(scenario, flags=None):
    """sqrt(T_t / T_b) * p0(T_b)."""
    s = scenario.validate()
    return math.sqrt(s.t_top / s.t_bottom) * vapor_pressure(s.t_bottom, s.correlation, flags)


def quantum_pressure(t, molar_mass=ANTHRACENE_MOLAR_MASS):
    """(m k T / 2 pi hbar^2)^(3/2) k T in Pa."""
    m = molar_mass * 1e-3 / constants.N_A
    return (m * K_B * t / (2 * math.pi * HBAR**2)) ** 1.5 * K_B * t


def chemical_potential(p, t, molar_mass=ANTHRACENE_MOLAR_MASS):
    """Ideal-gas chemical potential -k T ln(p_Q / p) in meV."""
    if not p > 0:
        raise NonPositivePressure(f"pressure must be positive, got {p}")
    return -K_B * t * math.log(quantum_pressure(t, molar_mass) / p) / MEV


def delta_mu(scenario, flags=None):
    """k_B T_t ln(p_t / p0(T_t)) in meV."""
    s = scenario.validate()
    p_t = top_pressure(s, flags)
    p0_t = vapor_pressure(s.t_top, s.correlation, flags)
    return K_B * s.t_top * math.log(p_t / p0_t) / MEV


def critical_delta_mu(ab=UNIT_CELL_AB, gamma=GAMMA_001, sigma=0.0):
    """Two-dimensional growth threshold 2 ab (2 gamma - sigma), meV."""
    if not (ab > 0 and gamma > 0):
        raise InvalidConfig("ab and gamma must be positive")
    return 2.0 * ab * (2.0 * gamma - sigma)


def extract_sigma(delta_mu_meas, ab=UNIT_CELL_AB, gamma=GAMMA_001, delta_mu_err=0.0):
    """Invert the threshold for the substrate interface energy.

    Returns ``(sigma, sigma_err)`` in meV/Angstrom^2 with first-order error
    propagation from ``delta_mu_err``.
    """
    if not ab > 0:
        raise InvalidConfig("ab must be positive")
    return 2.0 * gamma - delta_mu_meas / (2.0 * ab), abs(delta_mu_err) / (2.0 * ab)


def predict_morphology(scenario, flags=None):
    """``mesas`` above the threshold, ``needles`` below it, ``equilibrium`` at or below zero drive."""
    if scenario.sigma_substrate is None:
        raise InvalidConfig("sigma_substrate is required to predict morphology")
    dmu = delta_mu(scenario, flags)
    if dmu <= 0:
        return "equilibrium"
    crit = critical_delta_mu(scenario.unit_cell_ab, scenario.gamma_001, scenario.sigma_substrate)
    return "mesas" if dmu > crit else "needles"


def crossover_temperature(scenario, t_lo=None, t_hi=None):
    """Bottom temperature (K) at which delta_mu reaches the growth threshold."""
    if scenario.sigma_substrate is None:
        raise InvalidConfig("sigma_substrate is required")
    crit = critical_delta_mu(scenario.unit_cell_ab, scenario.gamma_001, scenario.sigma_substrate)
    t_lo = t_lo or scenario.t_top
    t_hi = t_hi or 2000.0

    def gap(tb):
        return delta_mu(replace(scenario, t_bottom=tb)) - crit

    if gap(t_lo) > 0 or gap(t_hi) < 0:
        raise InvalidConfig("threshold is not crossed inside the search interval")
    return brentq(gap, t_lo, t_hi, xtol=1e-9)


@dataclass
class ThermoReport:
    t_bottom: float
    t_top: float
    correlation: str
    p0_bottom: float
    p0_top: float
    p_top: float
    pressure_ratio: float
    quantum_pressure: float
    mu_vapor: float
    mu_surface: float
    delta_mu: float
    delta_mu_critical: float | None = None
    predicted_morphology: str | None = None
    out_of_range_flags: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def thermo_report(scenario):
    s = scenario.validate()
    corr = get_correlation(s.correlation)
    flags = []
    p0_b = vapor_pressure(s.t_bottom, corr, flags)
    p0_t = vapor_pressure(s.t_top, corr, flags)
    p_t = math.sqrt(s.t_top / s.t_bottom) * p0_b
    mu1 = chemical_potential(p_t, s.t_top, s.molar_mass)
    mu2 = chemical_potential(p0_t, s.t_top, s.molar_mass)
    dmu = K_B * s.t_top * math.log(p_t / p0_t) / MEV
    crit = morph = None
    if s.sigma_substrate is not None:
        crit = critical_delta_mu(s.unit_cell_ab, s.gamma_001, s.sigma_substrate)
        morph = "equilibrium" if dmu <= 0 else ("mesas" if dmu > crit else "needles")
    label = s.correlation if isinstance(s.correlation, str) else corr.source_label
    return ThermoReport(
        t_bottom=s.t_bottom,
        t_top=s.t_top,
        correlation=label,
        p0_bottom=p0_b,
        p0_top=p0_t,
        p_top=p_t,
        pressure_ratio=p0_b / p0_t,
        quantum_pressure=quantum_pressure(s.t_top, s.molar_mass),
        mu_vapor=mu1,
        mu_surface=mu2,
        delta_mu=dmu,
        delta_mu_critical=crit,
        predicted_morphology=morph,
        out_of_range_flags=flags,
    )


def sweep(t_bottoms, **scenario_kwargs):
    """Reports over a list of bottom temperatures (K)."""
    return [thermo_report(ThermoScenario(t_bottom=float(tb), **scenario_kwargs)) for tb in np.asarray(t_bottoms)]


def parse_temperature(text):
    """'243C', '516K' or a bare number (Kelvin) -> Kelvin."""
    s = str(text).strip()
    try:
        if s[-1] in "cC":
            return float(s[:-1]) + 273.15
        if s[-1] in "kK":
            return float(s[:-1])
        return float(s)
    except (ValueError, IndexError):
        raise InvalidConfig(f"cannot parse temperature {text!r}") from None


def parse_temperature_range(text):
    """'130C:260C:1C' -> array of Kelvin values, end inclusive."""
    parts = str(text).split(":")
    if len(parts) != 3:
        raise InvalidConfig(f"range must be start:stop:step, got {text!r}")
    start, stop = parse_temperature(parts[0]), parse_temperature(parts[1])
    step_s = parts[2].strip().rstrip("cCkK")
    step = float(step_s)
    if not step > 0:
        raise InvalidConfig("step must be positive")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)
