from .g2 import (
    G2TrainParams,
    eval_g2_train,
    fit_g2,
    g2_train_direct,
    g2_train_jacobian,
    g2_zero_from_areas,
)
from .lm import LMOptions, finite_difference_jacobian, levenberg_marquardt
from .polarization import (
    PolarizationParams,
    eval_malus,
    eval_polarization,
    fit_polarization,
    malus_jacobian,
    orientation_spread,
)
from .result import FitResult
from .saturation import SaturationParams, eval_saturation, fit_saturation, saturation_jacobian
from .survival import SurvivalCurve, SurvivalModel, eval_survival, fit_survival, survival_jacobian

__all__ = [
    "FitResult",
    "G2TrainParams",
    "LMOptions",
    "PolarizationParams",
    "SaturationParams",
    "SurvivalCurve",
    "SurvivalModel",
    "eval_g2_train",
    "eval_malus",
    "eval_polarization",
    "eval_saturation",
    "eval_survival",
    "finite_difference_jacobian",
    "fit_g2",
    "fit_polarization",
    "fit_saturation",
    "fit_survival",
    "g2_train_direct",
    "g2_train_jacobian",
    "g2_zero_from_areas",
    "levenberg_marquardt",
    "malus_jacobian",
    "orientation_spread",
    "saturation_jacobian",
    "survival_jacobian",
]
