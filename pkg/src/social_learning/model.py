"""Model parameters, social graph, linear update rules and covariance states.

Agents are 0-indexed everywhere, including in every external file format.
All value objects are immutable after construction: their numpy arrays are
marked read-only, so they can be shared between threads freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CapacityError, DegenerateInputError, ParameterError, StructuralError

# Centralised tolerances (double precision with O(n^3) accumulation).
STRUCT_TOL = 1e-12
PSD_SLACK = 1e-10
FIXED_POINT_TOL = 1e-12

# Largest agent count for which dense n x n objects are built.
MAX_DENSE_N = 4096


def _frozen(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Drift deviation ``sigma``, measurement deviations ``tau`` and agent count ``n``.

    ``tau`` may be given as a scalar, in which case every agent gets the same
    measurement deviation.
    """

    n: int
    sigma: float
    tau: np.ndarray

    def __post_init__(self):
        if isinstance(self.n, bool) or int(self.n) != self.n or self.n < 1:
            raise ParameterError(f"n must be a positive integer, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))
        sigma = float(self.sigma)
        if not np.isfinite(sigma) or sigma < 0:
            raise ParameterError(f"sigma must be finite and >= 0, got {self.sigma!r}")
        object.__setattr__(self, "sigma", sigma)
        tau = np.asarray(self.tau, dtype=float)
        if tau.ndim == 0:
            tau = np.full(self.n, float(tau))
        if tau.shape != (self.n,):
            raise StructuralError(f"tau has shape {tau.shape}, expected ({self.n},)")
        if not np.all(np.isfinite(tau)) or np.any(tau <= 0):
            raise ParameterError("every tau_i must be finite and > 0")
        object.__setattr__(self, "tau", _frozen(tau))

    @classmethod
    def uniform(cls, n, sigma=1.0, tau=1.0):
        return cls(n=n, sigma=sigma, tau=float(tau))

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.n == other.n and self.sigma == other.sigma
                and np.array_equal(self.tau, other.tau))

    __hash__ = None

    @property
    def sigma2(self):
        return self.sigma ** 2

    @cached_property
    def tau2(self):
        """Measurement variances tau_i^2 (the diagonal of T)."""
        return _frozen(self.tau ** 2)

    @cached_property
    def y(self):
        """Sum of measurement variances."""
        return float(np.sum(self.tau2))

    @cached_property
    def z(self):
        """(sum tau_i^2)(sum tau_i^-2); at least n^2 by Cauchy-Schwarz."""
        return self.y * float(np.sum(1.0 / self.tau2))

    @cached_property
    def z_excess(self):
        """``z - n^2 >= 0``, computed without forming the O(n^2)-sized difference."""
        u = self.tau2
        nu = float(np.mean(1.0 / u))
        return max(0.0, self.n * float(np.sum(u * nu - 1.0)))

    @cached_property
    def tau_star2(self):
        """Variance of the inverse-variance weighted mean of one round of measurements."""
        return 1.0 / float(np.sum(1.0 / self.tau2))

    @cached_property
    def is_uniform(self):
        return bool(np.all(self.tau == self.tau[0]))

    def measurement_cov(self):
        """The diagonal matrix T = diag(tau_i^2)."""
        _check_dense(self.n)
        return np.diag(self.tau2)

    def target_variance(self):
        """Per-agent variance sigma^2 tau_i^2 / (sigma^2 + tau_i^2) of knowing S(t-1) exactly."""
        return self.sigma2 * self.tau2 / (self.sigma2 + self.tau2)


def _check_dense(n):
    if n > MAX_DENSE_N:
        raise CapacityError(f"n={n} exceeds the dense limit {MAX_DENSE_N}")


@dataclass(frozen=True, eq=False)
class SocialGraph:
    """Directed graph stored as a dense boolean mask; ``mask[i, j]`` means j is a neighbor of i.

    Self-loops are always present: they are added if the caller omits them.
    """

    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool)
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1] or mask.shape[0] < 1:
            raise StructuralError(f"adjacency mask must be square and non-empty, got {mask.shape}")
        _check_dense(mask.shape[0])
        np.fill_diagonal(mask, True)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def complete(cls, n):
        _check_dense(n)
        return cls(np.ones((n, n), dtype=bool))

    @classmethod
    def from_edges(cls, n, edges):
        """Build from ordered pairs ``(i, j)`` meaning j is in the neighborhood of i."""
        if n < 1:
            raise ParameterError(f"n must be positive, got {n}")
        _check_dense(n)
        mask = np.zeros((n, n), dtype=bool)
        for i, j in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise StructuralError(f"edge ({i}, {j}) has an index outside [0, {n})")
            mask[i, j] = True
        return cls(mask)

    @property
    def n(self):
        return self.mask.shape[0]

    @property
    def edges(self):
        return {(int(i), int(j)) for i, j in zip(*np.nonzero(self.mask))}

    @property
    def is_complete(self):
        return bool(self.mask.all())

    def neighbors(self, i):
        return np.flatnonzero(self.mask[i])

    def __eq__(self, other):
        if not isinstance(other, SocialGraph):
            return NotImplemented
        return np.array_equal(self.mask, other.mask)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LinearRule:
    """Measurement weights ``a`` (diagonal of A) and neighbor weights ``p`` (matrix P).

    Construction only checks shapes and finiteness. Whether the rule is
    admissible for a graph is decided by :func:`validate_rule`, because
    deliberately invalid rules are useful (bias experiments) and best-response
    rules may carry negative neighbor weights.
    """

    a: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        p = np.atleast_2d(np.asarray(self.p, dtype=float))
        n = a.shape[0]
        if a.ndim != 1 or p.shape != (n, n):
            raise StructuralError(f"rule shapes a={a.shape}, p={p.shape} are inconsistent")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(p))):
            raise ParameterError("rule weights must be finite")
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "p", _frozen(p))

    @property
    def n(self):
        return self.a.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LinearRule):
            return NotImplemented
        return np.array_equal(self.a, other.a) and np.array_equal(self.p, other.p)

    __hash__ = None


@dataclass(frozen=True)
class ValidationResult:
    """Outcome of :func:`validate_rule`.

    ``row_excess[i]`` is ``a_i + sum_j p_ij - 1``. ``support_violations`` lists
    the (i, j) with nonzero weight outside the graph, ``range_violations`` the
    entries that are negative (or ``a_i > 1``).
    """

    row_excess: tuple
    support_violations: tuple
    range_violations: tuple
    tol: float = STRUCT_TOL

    @property
    def sum_ok(self):
        return all(abs(e) <= self.tol for e in self.row_excess)

    @property
    def valid(self):
        return self.sum_ok and not self.support_violations and not self.range_violations

    def __bool__(self):
        return self.valid

    def describe(self):
        if self.valid:
            return "valid"
        parts = []
        for i, e in enumerate(self.row_excess):
            if abs(e) > self.tol:
                parts.append(f"row {i}: a_i + sum_j p_ij - 1 = {e:.6g}")
        for i, j in self.support_violations:
            parts.append(f"p[{i},{j}] nonzero but ({i},{j}) is not an edge")
        for where in self.range_violations:
            parts.append(f"{where} out of range")
        return "; ".join(parts)


def validate_rule(rule, graph, *, require_nonnegative=True, tol=STRUCT_TOL):
    """Check the convexity constraint ``a_i + sum_j p_ij = 1`` and the graph support of ``p``.

    Raises :class:`StructuralError` when the agent counts differ; constraint
    violations are reported in the returned :class:`ValidationResult`.
    Best-response rules may legitimately carry negative neighbor weights, pass
    ``require_nonnegative=False`` for those.
    """
    if rule.n != graph.n:
        raise StructuralError(f"rule has n={rule.n} but graph has n={graph.n}")
    excess = rule.a + rule.p.sum(axis=1) - 1.0
    off_support = (~graph.mask) & (rule.p != 0.0)
    support = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(off_support)))
    ranges = []
    if require_nonnegative:
        ranges += [f"a[{i}]={rule.a[i]:.6g}" for i in np.flatnonzero((rule.a < 0) | (rule.a > 1))]
        ranges += [f"p[{i},{j}]={rule.p[i, j]:.6g}" for i, j in zip(*np.nonzero(rule.p < 0))]
    return ValidationResult(tuple(float(e) for e in excess), support, tuple(ranges), tol)


def uniform_clique_rule(params, alpha):
    """``a_i = alpha`` and ``p_ij = (1 - alpha) / n`` for every i, j (complete graph)."""
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    n = params.n
    _check_dense(n)
    return LinearRule(np.full(n, alpha), np.full((n, n), (1.0 - alpha) / n))


def neighbor_uniform_rule(graph, alpha):
    """``a_i = alpha`` and the remaining mass split evenly over the neighborhood of i."""
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    deg = graph.mask.sum(axis=1, keepdims=True)
    p = graph.mask * ((1.0 - alpha) / deg)
    return LinearRule(np.full(graph.n, alpha), p)


def check_covariance(c, *, sym_tol=STRUCT_TOL, psd_slack=PSD_SLACK):
    """Raise :class:`DegenerateInputError` unless ``c`` is a finite symmetric PSD matrix.

    Both tolerances are scaled by ``max(1, max|c_ij|)``.
    """
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise StructuralError(f"covariance must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DegenerateInputError("covariance has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(c))) if c.size else 1.0)
    asym = float(np.max(np.abs(c - c.T))) if c.size else 0.0
    if asym > sym_tol * scale:
        raise DegenerateInputError(f"covariance is not symmetric (max asymmetry {asym:.3g})")
    try:
        np.linalg.cholesky(c + psd_slack * scale * np.eye(c.shape[0]))
    except np.linalg.LinAlgError:
        lam = float(np.linalg.eigvalsh(c).min())
        raise DegenerateInputError(f"covariance is not PSD (min eigenvalue {lam:.3g})") from None


@dataclass(frozen=True, eq=False)
class CovarianceState:
    """Error covariance ``c`` of the agents' estimators at round ``t``."""

    c: np.ndarray
    t: int = 0
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        c = np.array(self.c, dtype=float)
        if c.ndim == 0:
            c = c.reshape(1, 1)
        if self.validate:
            check_covariance(c)
        if self.t < 0:
            raise ParameterError(f"round index must be >= 0, got {self.t}")
        object.__setattr__(self, "c", _frozen(c))
        object.__setattr__(self, "t", int(self.t))

    @property
    def n(self):
        return self.c.shape[0]

    @property
    def beta(self):
        """Variance of the best unbiased linear pooling of all estimators, 1/(1' C^-1 1)."""
        from .estimation import mvule_weights

        return mvule_weights(self.c).variance

    @property
    def variances(self):
        return np.diag(self.c).copy()

    def max_offdiag(self):
        if self.n == 1:
            return 0.0
        off = self.c[~np.eye(self.n, dtype=bool)]
        return float(np.max(np.abs(off)))


def initial_state(params, c0=None):
    """Round-0 state; the default is ``diag(tau_i^2)`` (one private measurement each)."""
    if c0 is None:
        return CovarianceState(params.measurement_cov(), 0)
    if isinstance(c0, CovarianceState):
        c0 = c0.c
    c0 = np.asarray(c0, dtype=float)
    if c0.shape != (params.n, params.n):
        raise StructuralError(f"C(0) has shape {c0.shape}, expected {(params.n, params.n)}")
    return CovarianceState(c0, 0)
