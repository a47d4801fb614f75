from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, is_dataclass

import numpy as np


@dataclass
class FitResult:
    """Outcome of a least-squares fit.

    ``params`` is the model-specific parameter record (or the raw vector for
    generic fits); ``values``/``covariance`` are in the order of ``names``.
    ``derived`` maps names of derived quantities (e.g. ``g2_zero``) to
    ``(value, stderr)``. ``flags`` collects diagnostics such as
    non-identifiable parameters.
    """

    params: object
    names: tuple
    values: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    n_iterations: int
    converged: bool
    flags: list = field(default_factory=list)
    derived: dict = field(default_factory=dict)

    @property
    def stderr(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def value(self, name):
        return float(self.values[self.names.index(name)])

    def error(self, name):
        return float(self.stderr[self.names.index(name)])

    def to_dict(self):
        params = asdict(self.params) if is_dataclass(self.params) else dict(zip(self.names, self.values))
        return {
            "parameters": _clean(params),
            "errors": _clean(dict(zip(self.names, self.stderr))),
            "names": list(self.names),
            "covariance": _clean(self.covariance.tolist()),
            "residual_norm": _clean(self.residual_norm),
            "converged": self.converged,
            "iterations": self.n_iterations,
            "flags": list(self.flags),
            "derived": {k: {"value": _clean(v), "error": _clean(e)} for k, (v, e) in self.derived.items()},
        }


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj
