"""Steady states of the three dynamics and the comparisons between them."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .dynamics import (
    best_response_step,
    clique_beta_map,
    clique_covariance,
    clique_variances,
    covariance_step,
    network_penultimate_initial,
    network_penultimate_step,
)
from .errors import ParameterError
from .estimation import fused_variance
from .model import FIXED_POINT_TOL, CovarianceState, ModelParams, SocialGraph, initial_state

BETA_TOL = 1e-14
DEFAULT_MAX_ITERS = 100_000
# Largest n for which reports carry the full steady-state matrix.
REPORT_DENSE_N = 1024
# Commonly quoted near-optimal alphas for the uniform clique (sigma = tau = 1).
QUOTED_ALPHA_N2 = 0.60352
QUOTED_ALPHA_INF = 0.59075


class PreconditionWarning(UserWarning):
    """The precondition that guarantees convergence does not hold for the given input."""


@dataclass(frozen=True, eq=False)
class SteadyStateReport:
    """Result of a steady-state computation.

    ``c_diag`` always holds the per-agent steady variances; ``c_star`` is the
    full matrix when n is small enough to form it. ``residual`` is the
    sup-norm distance between the state and its image under the round map.
    """

    beta_star: float
    c_star: np.ndarray | None
    c_diag: np.ndarray
    iterations: int
    rate_estimate: float
    method: str
    residual: float
    converged: bool = True
    start_gap: float | None = None
    history: np.ndarray | None = field(default=None, repr=False)

    def summary(self):
        out = {
            "method": self.method,
            "converged": self.converged,
            "beta_star": self.beta_star,
            "iterations": self.iterations,
            "rate_estimate": self.rate_estimate,
            "residual": self.residual,
            "c_ii": [float(v) for v in self.c_diag],
        }
        if self.start_gap is not None:
            out["start_gap"] = self.start_gap
        return out


def _rate_from_diffs(diffs, floor=1e-11):
    """Median ratio of successive step sizes, ignoring the ones lost in rounding."""
    d = np.asarray([v for v in diffs if v > floor])
    if d.size < 3:
        return 0.0
    ratios = d[1:] / d[:-1]
    return float(np.median(ratios[-min(10, ratios.size):]))


# --- best response on the complete graph ----------------------------------------------------


def best_response_steady_state(params, beta0=None, *, tol=BETA_TOL, max_iters=DEFAULT_MAX_ITERS,
                               keep_history=False, dense=None):
    """Iterate the complete-graph beta map to its fixed point.

    ``beta0`` defaults to the pooled variance of one private measurement per
    agent. The steady covariance is ``C(beta*)``. With ``dense`` (default: n
    up to ``REPORT_DENSE_N``) the full matrix is formed and the residual is
    measured through one matrix best-response round; otherwise only the
    diagonal is reported and the residual is that of the beta map.
    """
    beta = params.tau_star2 if beta0 is None else float(beta0)
    if beta < 0:
        raise ParameterError(f"beta0 must be >= 0, got {beta0}")
    history = [beta]
    diffs = []
    converged = False
    it = 0
    while it < max_iters:
        nxt = clique_beta_map(beta, params)
        it += 1
        diffs.append(abs(nxt - beta))
        beta = nxt
        history.append(beta)
        if diffs[-1] < tol:
            converged = True
            break
    c_diag = clique_variances(beta, params)
    c_star = None
    if dense is None:
        dense = params.n <= REPORT_DENSE_N
    if dense:
        c_star = clique_covariance(beta, params)
        step = best_response_step(CovarianceState(c_star, validate=False), SocialGraph.complete(params.n), params)
        residual = float(np.max(np.abs(step.next.c - c_star)))
    else:
        residual = abs(clique_beta_map(beta, params) - beta)
    return SteadyStateReport(
        beta_star=beta, c_star=c_star, c_diag=c_diag, iterations=it,
        rate_estimate=_rate_from_diffs(diffs), method="iteration", residual=residual,
        converged=converged, history=np.array(history) if keep_history else None,
    )


@dataclass(frozen=True, eq=False)
class CubicReport:
    """Roots of the steady-state cubic, in the derived form and in the literal printed form.

    Coefficients are in descending powers of beta. ``agrees`` compares the
    unique positive root with the iterated fixed point (tolerance 1e-6); the
    iteration is authoritative.
    """

    coefficients: np.ndarray
    real_roots: np.ndarray
    positive_root: float | None
    iteration_beta: float
    agrees: bool
    printed_coefficients: np.ndarray
    printed_real_roots: np.ndarray
    printed_positive_roots: np.ndarray
    printed_agrees: bool

    def discrepancy_report(self):
        lines = []
        if not self.agrees:
            lines.append(
                f"derived cubic positive root {self.positive_root!r} differs from iterated beta* "
                f"{self.iteration_beta:.17g}")
        if not self.printed_agrees:
            roots = ", ".join(f"{r:.12g}" for r in self.printed_positive_roots) or "none"
            lines.append(
                "printed sign pattern (beta^2 coefficient -((n-1)^2 y - z(y + 2 sigma^2))) has "
                f"positive root(s) {roots}, not beta* = {self.iteration_beta:.12g}; "
                f"the denominator-cleared beta^2 coefficient is {self.coefficients[1]:+.12g}, "
                f"the printed one {self.printed_coefficients[1]:+.12g}")
        return "\n".join(lines)


def cubic_coefficients(params):
    """Coefficients (descending) of ``num(beta) - beta * den(beta)`` from the beta map."""
    n, y, z, s = params.n, params.y, params.z, params.sigma2
    excess = params.z_excess
    # (n-1)^2 y - z (y + 2s) and y (z - (n-2) n - 2) + z s, with z = n^2 + excess
    return np.array([
        -z,
        y * (1 - 2 * n - excess) - 2 * z * s,
        -s * (y * (excess + 2 * n - 2) + z * s),
        y * s * (y + s),
    ])


def printed_cubic_coefficients(params):
    """The same cubic with the beta^2 sign as typeset in the source derivation."""
    c = cubic_coefficients(params)
    c[1] = -c[1]
    return c


def companion_roots(coeffs):
    """All roots of a polynomial (descending coefficients) as companion-matrix eigenvalues."""
    coeffs = np.trim_zeros(np.asarray(coeffs, dtype=float), "f")
    deg = coeffs.size - 1
    if deg < 1:
        return np.array([], dtype=complex)
    monic = coeffs[1:] / coeffs[0]
    comp = np.zeros((deg, deg))
    comp[0, :] = -monic
    comp[1:, :-1] = np.eye(deg - 1)
    return np.linalg.eigvals(comp)


def _real_roots(coeffs, imag_tol=1e-10):
    roots = companion_roots(coeffs)
    real = np.sort(np.array([r.real for r in roots if abs(r.imag) <= imag_tol * max(1.0, abs(r))]))
    # Newton polish against the original coefficients.
    dcoef = np.polyder(coeffs)
    for _ in range(3):
        dv = np.polyval(dcoef, real)
        step = np.where(dv != 0, np.polyval(coeffs, real) / np.where(dv != 0, dv, 1.0), 0.0)
        real = real - step
    return real


def steady_state_cubic_roots(params, iteration_beta=None):
    """Solve the steady-state cubic and cross-check its positive root against iteration."""
    if iteration_beta is None:
        iteration_beta = best_response_steady_state(params).beta_star
    coeffs = cubic_coefficients(params)
    real = _real_roots(coeffs)
    positive = real[real > 0]
    root = float(positive[0]) if positive.size == 1 else None
    agrees = root is not None and abs(root - iteration_beta) <= 1e-6
    printed = printed_cubic_coefficients(params)
    p_real = _real_roots(printed)
    p_pos = p_real[p_real > 0]
    p_agrees = p_pos.size == 1 and abs(p_pos[0] - iteration_beta) <= 1e-6
    return CubicReport(coeffs, real, root, float(iteration_beta), bool(agrees),
                       printed, p_real, p_pos, bool(p_agrees))


# --- fixed response -----------------------------------------------------------------------


def _fixed_iterate(state, rule, params, tol, max_iters):
    diffs = []
    converged = False
    it = 0
    while it < max_iters:
        nxt = covariance_step(state, rule, params)
        it += 1
        delta = float(np.max(np.abs(nxt.c - state.c)))
        diffs.append(delta)
        state = nxt
        scale = max(1.0, float(np.max(np.abs(state.c))))
        if not np.isfinite(scale):
            break
        if delta < tol * scale:
            converged = True
            break
    return state, diffs, converged, it


def fixed_response_steady_state(rule, params, c0=None, *, tol=FIXED_POINT_TOL,
                                max_iters=DEFAULT_MAX_ITERS, second_start="zero"):
    """Iterate ``C <- A^2 T + sigma^2 P11'P' + P C P'`` to its fixed point.

    Convergence is guaranteed when every ``a_i > 0``; otherwise a
    :class:`PreconditionWarning` is issued and the report may come back with
    ``converged=False``. ``second_start`` re-runs from another initial
    covariance (``"zero"``, a matrix, or None to skip) and records the sup-norm
    gap between the two limits in ``start_gap``.
    """
    if np.any(rule.a <= 0):
        warnings.warn("some a_i = 0: fixed-response convergence is not guaranteed",
                      PreconditionWarning, stacklevel=2)
    state0 = initial_state(params, c0)
    state, diffs, converged, it = _fixed_iterate(state0, rule, params, tol, max_iters)
    c = state.c
    drift = rule.p.sum(axis=1)
    image = (np.diag(rule.a ** 2 * params.tau2) + params.sigma2 * np.outer(drift, drift)
             + rule.p @ c @ rule.p.T)
    residual = float(np.max(np.abs(image - c)))
    start_gap = None
    if second_start is not None and converged:
        alt = np.zeros_like(c) if isinstance(second_start, str) else second_start
        other, _, ok, _ = _fixed_iterate(initial_state(params, alt), rule, params, tol, max_iters)
        start_gap = float(np.max(np.abs(other.c - c))) if ok else math.inf
    try:
        beta = state.beta
    except Exception:  # non-finite divergence
        beta = math.nan
    return SteadyStateReport(
        beta_star=beta, c_star=c, c_diag=np.diag(c).copy(), iterations=it,
        rate_estimate=_rate_from_diffs(diffs, floor=1e-13), method="lyapunov",
        residual=residual, converged=converged, start_gap=start_gap,
    )


def clique_fixed_pooled_variance(n, alpha, sigma=1.0, tau=1.0):
    """Steady variance of the agents' average under the uniform clique rule."""
    alpha = _check_alpha(alpha)
    s, t2 = sigma ** 2, tau ** 2
    return (alpha ** 2 * t2 / n + (1 - alpha) ** 2 * s) / (alpha * (2 - alpha))


def clique_fixed_variance(n, alpha, sigma=1.0, tau=1.0):
    """Per-agent steady variance of the uniform clique rule ``a = alpha, p_ij = (1-alpha)/n``.

    For ``sigma = tau = 1`` this is
    ``alpha^2 + (1-alpha)^2 (1 + alpha^2/n) / ((2-alpha) alpha)``. ``n`` may be
    ``math.inf`` for the large-population limit ``alpha^2 + 1/(alpha(2-alpha)) - 1``.
    """
    alpha = _check_alpha(alpha)
    if alpha == 1.0:
        return float(tau ** 2)
    pooled = clique_fixed_pooled_variance(n, alpha, sigma, tau)
    return alpha ** 2 * tau ** 2 + (1 - alpha) ** 2 * (pooled + sigma ** 2)


def clique_fixed_variance_iterative(n, alpha, sigma=1.0, tau=1.0, tol=1e-15, max_iters=DEFAULT_MAX_ITERS):
    """The same quantity by iterating the pooled-average recursion (no closed form)."""
    alpha = _check_alpha(alpha)
    s, t2 = sigma ** 2, tau ** 2
    b = t2 / n
    for _ in range(max_iters):
        nxt = alpha ** 2 * t2 / n + (1 - alpha) ** 2 * (b + s)
        done = abs(nxt - b) < tol
        b = nxt
        if done:
            break
    return alpha ** 2 * t2 + (1 - alpha) ** 2 * (b + s)


def _check_alpha(alpha):
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    return alpha


def optimal_clique_alpha(n, sigma=1.0, tau=1.0):
    """Minimise :func:`clique_fixed_variance` over alpha; returns ``(alpha, variance)``."""
    res = minimize_scalar(lambda a: clique_fixed_variance(n, a, sigma, tau),
                          bounds=(1e-9, 1.0), method="bounded", options={"xatol": 1e-12})
    return float(res.x), float(res.fun)


def _uniform_tau(params):
    if not params.is_uniform:
        raise ParameterError("this analysis requires identical tau_i")
    return float(params.tau[0])


@dataclass(frozen=True, eq=False)
class NonOptimalityReport:
    """Best-response steady variance against uniform clique fixed rules on an alpha grid."""

    n: int
    alphas: np.ndarray
    c_fixed: np.ndarray
    c_best: float
    grid_alpha: float
    grid_c_fixed: float
    opt_alpha: float
    opt_c_fixed: float

    @property
    def gap(self):
        """``C_br - min C_fr`` over the grid; positive means some fixed rule beats best response."""
        return self.c_best - self.grid_c_fixed

    @property
    def fixed_beats_best(self):
        return self.gap > 1e-12

    def rows(self):
        return [(float(a), float(c), float(self.c_best - c)) for a, c in zip(self.alphas, self.c_fixed)]


def non_optimality_report(params, alpha_grid=None):
    """Compare best response with every uniform clique rule on ``alpha_grid`` (complete graph, uniform tau)."""
    tau = _uniform_tau(params)
    if alpha_grid is None:
        alpha_grid = np.round(np.arange(0.001, 1.0 + 1e-12, 0.001), 12)
    alphas = np.asarray(alpha_grid, dtype=float)
    c_fixed = np.array([clique_fixed_variance(params.n, a, params.sigma, tau) for a in alphas])
    c_best = float(best_response_steady_state(params).c_diag[0])
    k = int(np.argmin(c_fixed))
    opt_alpha, opt_c = optimal_clique_alpha(params.n, params.sigma, tau)
    return NonOptimalityReport(params.n, alphas, c_fixed, c_best, float(alphas[k]), float(c_fixed[k]),
                               opt_alpha, opt_c)


# --- large-n limits ---------------------------------------------------------------------


def limit_cubic_coefficients(sigma=1.0, tau=1.0):
    """Leading-order cubic for beta* as n -> inf with identical tau (y = n tau^2, z = n^2)."""
    s, t2 = sigma ** 2, tau ** 2
    return np.array([1.0, 2 * (t2 + s), s * (2 * t2 + s), -s * t2 ** 2])


def unit_limit_beta_closed_form():
    """``(2/3) sqrt(7) cos(atan(3 sqrt 3) / 3) - 4/3``, the limit of beta* for sigma = tau = 1."""
    return 2.0 / 3.0 * math.sqrt(7.0) * math.cos(math.atan(3.0 * math.sqrt(3.0)) / 3.0) - 4.0 / 3.0


@dataclass(frozen=True, eq=False)
class LargeNLimits:
    sigma: float
    tau: float
    beta_limit: float
    beta_closed_form: float | None
    c_best_limit: float
    alpha_inf: float
    c_fixed_limit: float
    opt_alpha_inf: float
    opt_c_fixed_limit: float
    numeric_best: dict
    numeric_fixed: dict

    @property
    def monotone_approach(self):
        ns = sorted(self.numeric_best)
        errs = [abs(self.numeric_best[k] - self.c_best_limit) for k in ns]
        return all(b <= a for a, b in zip(errs, errs[1:]))


def large_n_limits(sigma=1.0, tau=1.0, alpha_inf=QUOTED_ALPHA_INF, numeric_ns=(10 ** 3, 10 ** 6)):
    """Large-population limits of the best-response and uniform-clique fixed-response variances.

    The best-response limit solves the leading-order cubic; when
    ``sigma = tau = 1`` the trigonometric closed form is also returned. The
    finite-n values at ``numeric_ns`` come from iterating the exact maps.
    """
    real = _real_roots(limit_cubic_coefficients(sigma, tau))
    beta_lim = float(real[real > 0][0]) if np.any(real > 0) else 0.0
    closed = unit_limit_beta_closed_form() if sigma == 1.0 and tau == 1.0 else None
    c_best = float(fused_variance(beta_lim + sigma ** 2, tau ** 2))
    opt_alpha, opt_c = optimal_clique_alpha(math.inf, sigma, tau)
    numeric_best, numeric_fixed = {}, {}
    for n in numeric_ns:
        params = ModelParams.uniform(int(n), sigma, tau)
        numeric_best[int(n)] = float(best_response_steady_state(params).c_diag[0])
        numeric_fixed[int(n)] = clique_fixed_variance_iterative(int(n), alpha_inf, sigma, tau)
    return LargeNLimits(sigma, tau, beta_lim, closed, c_best, alpha_inf,
                        clique_fixed_variance(math.inf, alpha_inf, sigma, tau),
                        opt_alpha, opt_c, numeric_best, numeric_fixed)


# --- penultimate prediction --------------------------------------------------------------


def penultimate_steady_variance(params):
    """Positive root of ``V^2 + sigma^2 V - sigma^2 tau_*^2 = 0``, the steady full-information variance."""
    s, ts2 = params.sigma2, params.tau_star2
    return 0.5 * (-s + math.sqrt(s * s + 4 * s * ts2))


def penultimate_steady_state(params, v0=None, *, tol=BETA_TOL, max_iters=DEFAULT_MAX_ITERS):
    """Iterate ``V <- (V + sigma^2) tau_*^2 / (V + sigma^2 + tau_*^2)``; ``beta_star`` reports V*."""
    s, ts2 = params.sigma2, params.tau_star2
    v = ts2 if v0 is None else float(v0)
    diffs = []
    converged = False
    it = 0
    while it < max_iters:
        nxt = (v + s) * ts2 / (v + s + ts2)
        it += 1
        diffs.append(abs(nxt - v))
        v = nxt
        if diffs[-1] < tol:
            converged = True
            break
    residual = abs((v + s) * ts2 / (v + s + ts2) - v)
    return SteadyStateReport(
        beta_star=v, c_star=None, c_diag=fused_variance(v + s, params.tau2), iterations=it,
        rate_estimate=_rate_from_diffs(diffs), method="iteration", residual=residual,
        converged=converged,
    )


# --- socially asymptotic learning ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GapCurve:
    """Steady per-agent variance minus the ``sigma^2 tau^2/(sigma^2 + tau^2)`` target, per n.

    For the fixed model each n uses the best uniform clique rule. ``bound``
    is ``tau^6 / (n (sigma^2 + tau^2)^2)`` for penultimate prediction.
    ``claim_applies`` is False when sigma = 0 (constant state).
    """

    model: str
    sigma: float
    tau: float
    ns: np.ndarray
    c_ii: np.ndarray
    target: float
    gaps: np.ndarray
    bounds: np.ndarray | None
    limit_gap: float | None
    claim_applies: bool

    def rows(self):
        out = []
        for i, n in enumerate(self.ns):
            b = None if self.bounds is None else float(self.bounds[i])
            out.append((int(n), float(self.c_ii[i]), float(self.gaps[i]), b))
        return out


MODELS = ("fixed", "best", "penultimate")


def asymptotic_learning_gap(params, model, n_grid):
    """Gap between the steady variance and the socially-asymptotic target along ``n_grid``.

    ``params`` supplies sigma and a uniform tau; its n is ignored.
    """
    if model not in MODELS:
        raise ParameterError(f"model must be one of {MODELS}, got {model!r}")
    tau = _uniform_tau(params)
    sigma = params.sigma
    s, t2 = sigma ** 2, tau ** 2
    target = s * t2 / (s + t2)
    ns = np.asarray(list(n_grid), dtype=int)
    if sigma == 0.0:
        nan = np.full(ns.shape, math.nan)
        return GapCurve(model, sigma, tau, ns, nan, 0.0, nan, None, None, False)
    c = np.empty(ns.size)
    bounds = None
    limit = None
    for k, n in enumerate(ns):
        p = ModelParams.uniform(int(n), sigma, tau)
        if model == "best":
            c[k] = best_response_steady_state(p, dense=False).c_diag[0]
        elif model == "fixed":
            c[k] = optimal_clique_alpha(int(n), sigma, tau)[1]
        else:
            v = penultimate_steady_variance(p)
            c[k] = fused_variance(v + s, t2)
    if model == "penultimate":
        bounds = t2 ** 3 / (ns * (s + t2) ** 2)
        limit = 0.0
    elif model == "best":
        limit = large_n_limits(sigma, tau, numeric_ns=()).c_best_limit - target
    else:
        limit = optimal_clique_alpha(math.inf, sigma, tau)[1] - target
    return GapCurve(model, sigma, tau, ns, c, target, c - target, bounds, limit, True)


# --- arbitrary graphs ------------------------------------------------------------------------


def network_steady_state(params, graph, model, rule=None, c0=None, *, tol=FIXED_POINT_TOL,
                         max_iters=DEFAULT_MAX_ITERS):
    """Steady state of any of the three dynamics on an arbitrary graph by iterating the matrix map.

    Fixed response delegates to :func:`fixed_response_steady_state`. The
    other two iterate the full round map until the covariance moves by less
    than ``tol`` (relative to its scale); no convergence guarantee is claimed
    off the complete graph, so check ``converged``.
    """
    if model not in MODELS:
        raise ParameterError(f"model must be one of {MODELS}, got {model!r}")
    if model == "fixed":
        if rule is None:
            raise ParameterError("the fixed model needs a rule")
        return fixed_response_steady_state(rule, params, c0, tol=tol, max_iters=max_iters, second_start=None)
    if model == "best":
        state = initial_state(params, c0)

        def advance(s):
            return best_response_step(s, graph, params).next

        def cov(s):
            return s.c
    else:
        state = network_penultimate_initial(params, c0)

        def advance(s):
            return network_penultimate_step(s, graph, params).next

        def cov(s):
            return s.c
    diffs = []
    converged = False
    it = 0
    while it < max_iters:
        nxt = advance(state)
        it += 1
        delta = float(np.max(np.abs(cov(nxt) - cov(state))))
        diffs.append(delta)
        state = nxt
        if delta < tol * max(1.0, float(np.max(np.abs(cov(state))))):
            converged = True
            break
    c = cov(state).copy()
    residual = float(np.max(np.abs(cov(advance(state)) - c)))
    return SteadyStateReport(
        beta_star=CovarianceState(c, validate=False).beta, c_star=c, c_diag=np.diag(c).copy(),
        iterations=it, rate_estimate=_rate_from_diffs(diffs, floor=1e-13), method="iteration",
        residual=residual, converged=converged,
    )
