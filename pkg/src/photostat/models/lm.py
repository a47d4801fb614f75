"""Levenberg-Marquardt least squares with optional box bounds.

The damping update follows Nielsen's gain-ratio rule; the damped step is solved
as an augmented least-squares problem so rank-deficient Jacobians (parameters
the data do not constrain) give a minimum-norm step instead of blowing up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NonConvergence, SingularJacobian
from .result import FitResult


@dataclass
class LMOptions:
    xtol: float = 1e-10
    ftol: float = 1e-10
    gtol: float = 1e-14
    max_iter: int = 200
    lambda0: float = 1e-3
    fd_step: float = 1e-6
    scale_covariance: bool = False
    raise_on_failure: bool = True


def finite_difference_jacobian(fun, x, step=1e-6):
    """Central differences with step ``step * max(|x_i|, 1)``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x), dtype=float)
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = step * max(abs(x[i]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * h)
    return jac


def _covariance(jw, scale):
    """Inverse of J^T J at the solution, via SVD; null directions get infinite variance."""
    u, s, vt = np.linalg.svd(jw, full_matrices=False)
    tol = s.max(initial=0.0) * max(jw.shape) * np.finfo(float).eps
    keep = s > tol
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep] ** 2
    cov = (vt.T * inv) @ vt
    cov = 0.5 * (cov + cov.T) * scale
    rank_deficient = not keep.all()
    if rank_deficient:
        for v in vt[~keep]:
            idx = np.abs(v) > 1e-8
            cov[idx, idx] = np.inf
    return cov, rank_deficient


def levenberg_marquardt(
    model,
    init,
    ydata,
    sigma=None,
    jacobian=None,
    bounds=None,
    options=None,
    names=None,
):
    """Minimise ``sum(((model(x) - ydata) / sigma)**2)`` over ``x``.

    ``model(x)`` returns the model vector; ``jacobian(x)`` returns d model / d x
    with shape (n_data, n_params), or ``None`` for central differences.
    ``bounds`` is ``(lower, upper)``; steps are projected onto the box.
    Convergence: relative step below ``xtol`` or relative cost change below
    ``ftol``. Raises :class:`NonConvergence` after ``max_iter`` iterations
    unless ``options.raise_on_failure`` is false.
    """
    opts = options or LMOptions()
    x = np.array(init, dtype=float)
    y = np.asarray(ydata, dtype=float)
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)
    n = x.size
    if bounds is None:
        lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    else:
        lo = np.broadcast_to(np.asarray(bounds[0], float), (n,)).copy()
        hi = np.broadcast_to(np.asarray(bounds[1], float), (n,)).copy()
    x = np.clip(x, lo, hi)

    def resid(p):
        return (np.asarray(model(p), dtype=float) - y) * w

    if jacobian is None:
        def jac(p):
            return finite_difference_jacobian(model, p, opts.fd_step) * w[:, None]
    else:
        def jac(p):
            return np.asarray(jacobian(p), dtype=float) * w[:, None]

    r = resid(x)
    if not np.all(np.isfinite(r)):
        raise SingularJacobian("residuals are not finite at the initial point")
    cost = 0.5 * r @ r
    J = jac(x)
    if not np.all(np.isfinite(J)):
        raise SingularJacobian("Jacobian is not finite at the initial point")
    if not np.any(J):
        raise SingularJacobian("Jacobian is identically zero at the initial point")

    A = J.T @ J
    lam = opts.lambda0 * max(np.max(np.diag(A)), 1e-300)
    nu = 2.0
    converged = cost == 0.0
    it = 0
    while not converged and it < opts.max_iter:
        it += 1
        g = J.T @ r
        if np.max(np.abs(g)) <= opts.gtol * np.linalg.norm(J) * np.linalg.norm(r):
            converged = True
            break
        # freeze parameters held on a bound by the descent direction
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        step = np.zeros(n)
        if free.any():
            Jf = J[:, free]
            d = np.sum(Jf * Jf, axis=0)
            d = np.maximum(d, 1e-12 * max(d.max(), 1e-300))
            aug = np.vstack([Jf, np.diag(np.sqrt(lam * d))])
            rhs = np.concatenate([-r, np.zeros(d.size)])
            step[free] = np.linalg.lstsq(aug, rhs, rcond=None)[0]
        x_new = np.clip(x + step, lo, hi)
        step = x_new - x
        small_step = np.linalg.norm(step) <= opts.xtol * (np.linalg.norm(x) + opts.xtol)
        r_new = resid(x_new)
        cost_new = 0.5 * r_new @ r_new if np.all(np.isfinite(r_new)) else np.inf
        predicted = -(g @ step) - 0.5 * step @ (A @ step)
        rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
        if cost_new < cost or (cost_new == cost and small_step):
            rel_change = (cost - cost_new) / cost if cost > 0 else 0.0
            x, r, cost = x_new, r_new, cost_new
            J = jac(x)
            A = J.T @ J
            if rho > 0:
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            if small_step or rel_change <= opts.ftol or cost == 0.0:
                converged = True
        else:
            if small_step:
                converged = True
                break
            lam *= nu
            nu *= 2.0
            if not np.isfinite(lam) or lam > 1e300:
                break

    dof = max(y.size - n, 1)
    scale = (2 * cost / dof) if opts.scale_covariance else 1.0
    cov, rank_deficient = _covariance(J, scale)
    result = FitResult(
        params=x.copy(),
        names=tuple(names) if names else tuple(f"p{i}" for i in range(n)),
        values=x.copy(),
        covariance=cov,
        residual_norm=float(np.sqrt(2 * cost)),
        n_iterations=it,
        converged=bool(converged),
    )
    if rank_deficient:
        result.flags.append("rank_deficient")
    at_bound = (x <= lo) | (x >= hi)
    for i in np.flatnonzero(at_bound):
        result.flags.append(f"at_bound:{result.names[i]}")
    if not converged and opts.raise_on_failure:
        raise NonConvergence(f"no convergence after {it} iterations", result)
    return result
