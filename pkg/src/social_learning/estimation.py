"""Minimum variance unbiased linear estimation (MVULE) and the Woodbury identity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ParameterError, StructuralError
from .model import PSD_SLACK

PINV_REL_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MvuleResult:
    """Weights ``b`` (summing to one, possibly negative) and the variance of ``sum_i b_i Z_i - X``."""

    weights: np.ndarray
    variance: float


def mvule_weights(cov, rel_tol=PINV_REL_TOL):
    """Weights of the minimum variance unbiased linear combination of estimators.

    ``cov`` is the covariance matrix of the estimators' errors. For a
    nonsingular matrix the weights are ``1'C^-1 / 1'C^-1 1``. Eigenvalues
    below ``rel_tol * lambda_max`` are treated as zero; on a singular matrix
    the weights are not unique, but the returned variance is the minimum:

    * if some null direction ``v`` of C has ``1'v != 0`` the combination
      ``v / 1'v`` has zero error variance and is returned;
    * otherwise the pseudo-inverse restricted to the range of C is used.
    """
    c = np.asarray(cov, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
        raise StructuralError(f"covariance must be a non-empty square matrix, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DegenerateInputError("covariance has non-finite entries")
    m = c.shape[0]
    ones = np.ones(m)
    c = 0.5 * (c + c.T)
    lam, vecs = np.linalg.eigh(c)
    lam_max = float(np.max(np.abs(lam)))
    if lam[0] < -PSD_SLACK * max(1.0, lam_max):
        raise DegenerateInputError(f"covariance is not PSD (min eigenvalue {lam[0]:.3g})")
    null = lam <= rel_tol * lam_max

    if not null.any():
        w = np.linalg.solve(c, ones)
        s = float(w.sum())
        if not s > 0:
            raise DegenerateInputError("1'C^-1 1 is not positive")
        return MvuleResult(w / s, 1.0 / s)

    u0 = vecs[:, null]
    proj = u0 @ (u0.T @ ones)
    mass = float(proj.sum())  # = |U0' 1|^2
    if mass > 1e-10 * m:
        w = proj / mass
        return MvuleResult(w, max(0.0, float(w @ c @ w)))

    ur = vecs[:, ~null]
    w = ur @ ((ur.T @ ones) / lam[~null])
    s = float(w.sum())
    if not s > 0:
        raise DegenerateInputError("no unbiased combination: 1'C^+ 1 = 0")
    return MvuleResult(w / s, 1.0 / s)


def fuse_two_independent(var1, var2):
    """Optimal unbiased combination of two independent estimators with error variances var1, var2."""
    var1, var2 = float(var1), float(var2)
    if not (var1 > 0 and var2 > 0):
        raise ParameterError(f"variances must be positive, got {var1}, {var2}")
    total = var1 + var2
    return MvuleResult(np.array([var2 / total, var1 / total]), var1 * var2 / total)


def fused_variance(var1, var2):
    """Variance of the fused estimator, ``var1*var2/(var1+var2)``; vectorised and zero-safe."""
    var1 = np.asarray(var1, dtype=float)
    var2 = np.asarray(var2, dtype=float)
    total = var1 + var2
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, var1 * var2 / np.where(total > 0, total, 1.0), 0.0)
    return out if out.ndim else float(out)


def woodbury_inverse(x, u, y, v):
    """``(X + U Y V)^-1`` computed as ``X^-1 - X^-1 U (Y^-1 + V X^-1 U)^-1 V X^-1``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.asarray(u, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    v = np.asarray(v, dtype=float)
    n, k = x.shape[0], y.shape[0]
    u = u.reshape(n, k)
    v = v.reshape(k, n)
    if x.shape != (n, n) or y.shape != (k, k):
        raise StructuralError(f"inconsistent shapes X{x.shape} U{u.shape} Y{y.shape} V{v.shape}")
    try:
        x_inv = np.linalg.inv(x)
        y_inv = np.linalg.inv(y)
    except np.linalg.LinAlgError:
        raise DegenerateInputError("X and Y must be nonsingular") from None
    inner = y_inv + v @ x_inv @ u
    if k and np.linalg.cond(inner) > 1.0 / np.finfo(float).eps:
        raise DegenerateInputError("inner matrix Y^-1 + V X^-1 U is singular")
    if k == 0:
        return x_inv
    return x_inv - x_inv @ u @ np.linalg.solve(inner, v @ x_inv)
