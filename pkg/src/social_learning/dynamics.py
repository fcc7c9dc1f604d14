"""Exact covariance evolution of the three dynamics, one round at a time.

Conventions: ``C(t)`` is the covariance of ``Y(t) - 1 S(t)``; a round maps
``C(t-1)`` to ``C(t)`` through

    C(t) = A^2 T + P C(t-1) P' + sigma^2 P 1 1' P'

and every emitted matrix is symmetrised as ``(M + M')/2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DegenerateInputError, ParameterError, StructuralError
from .estimation import fused_variance, mvule_weights, woodbury_inverse
from .model import CovarianceState, LinearRule, initial_state

# Dimension cap for the brute-force full-information oracle.
ORACLE_MAX_DIM = 2000


def _sym(m):
    return 0.5 * (m + m.T)


def covariance_step(prev, rule, params):
    """Propagate the error covariance through one round of the linear rule."""
    n = prev.n
    if rule.n != n or params.n != n:
        raise StructuralError(f"dimension mismatch: C is {n}x{n}, rule n={rule.n}, params n={params.n}")
    p = rule.p
    drift = p.sum(axis=1)
    c = (np.diag(rule.a ** 2 * params.tau2) + p @ prev.c @ p.T
         + params.sigma2 * np.outer(drift, drift))
    return CovarianceState(_sym(c), prev.t + 1)


def covariance_closed_form(c0, rules, params):
    """``C(t) = sum_r Q(r,t) W(r) Q(r,t)'`` with ``Q(r,t) = P(t)...P(r+1)`` and ``W(0) = C(0)``.

    Evaluated without the recursion, as an independent route to the same
    matrix that :func:`covariance_step` produces.
    """
    rules = list(rules)
    if not rules:
        return c0
    n = c0.n
    for rule in rules:
        if rule.n != n:
            raise StructuralError(f"rule has n={rule.n} but C(0) is {n}x{n}")
    ws = [c0.c]
    for rule in rules:
        drift = rule.p.sum(axis=1)
        ws.append(np.diag(rule.a ** 2 * params.tau2) + params.sigma2 * np.outer(drift, drift))
    t = len(rules)
    total = np.zeros((n, n))
    q = np.eye(n)  # Q(t, t)
    for r in range(t, -1, -1):
        total += q @ ws[r] @ q.T
        if r > 0:
            q = q @ rules[r - 1].p  # Q(r-1, t) = Q(r, t) P(r)
    return CovarianceState(_sym(total), c0.t + t)


@dataclass(frozen=True, eq=False)
class BestResponseStep:
    """Rule chosen by myopic best response and the covariance it produces.

    ``neighborhood_beta[i]`` is the variance of agent i's best pooling of its
    neighbors' previous estimates, as an estimator of S(t-1).
    """

    rule: LinearRule
    next: CovarianceState
    neighborhood_beta: np.ndarray


def best_response_rule(prev, graph, params):
    """Each agent's minimum-variance weights given ``C(t-1)``, returned with the neighborhood betas.

    The fresh measurement M_i(t) is treated as independent of the neighbors'
    previous errors, so agent i first pools its neighbors (weights ``q_i``,
    variance ``beta_i``) and then fuses that pool, whose error w.r.t. S(t) has
    variance ``beta_i + sigma^2``, with its measurement.
    """
    n = prev.n
    if graph.n != n or params.n != n:
        raise StructuralError(f"dimension mismatch: C is {n}x{n}, graph n={graph.n}, params n={params.n}")
    a = np.empty(n)
    p = np.zeros((n, n))
    betas = np.empty(n)
    pooled = None
    if graph.is_complete:
        try:
            pooled = mvule_weights(prev.c)
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"degenerate neighborhood: {exc}") from exc
    for i in range(n):
        nbrs = graph.neighbors(i)
        if pooled is not None:
            res = pooled
        else:
            try:
                res = mvule_weights(prev.c[np.ix_(nbrs, nbrs)])
            except DegenerateInputError as exc:
                raise DegenerateInputError(f"agent {i}: degenerate neighborhood: {exc}", agent=i) from exc
        beta_i = res.variance
        prior = beta_i + params.sigma2
        a[i] = prior / (params.tau2[i] + prior)
        p[i, nbrs] = (1.0 - a[i]) * res.weights
        betas[i] = beta_i
    betas.setflags(write=False)
    return LinearRule(a, p), betas


def best_response_step(prev, graph, params):
    """One round of best-response dynamics."""
    rule, betas = best_response_rule(prev, graph, params)
    return BestResponseStep(rule, covariance_step(prev, rule, params), betas)


def _map_den(x, params):
    # y(y - (n-2) n x) + z x (x + y), rearranged so that no O(n^3) terms cancel
    n, y, z = params.n, params.y, params.z
    return y * y + z * x * x + x * y * (params.z_excess + 2 * n)


def clique_beta_map(beta, params):
    """The one-dimensional map beta(t-1) -> beta(t) of best response on the complete graph.

    ``f(b) = y x (y + x) / (y (y - (n-2) n x) + z x (y + x))`` with
    ``x = b + sigma^2``, ``y = sum tau_i^2`` and ``z = y sum tau_i^-2``.
    Accepts scalars or arrays; only n, y and z enter, so huge n is cheap.
    """
    return shifted_map(np.asarray(beta, dtype=float) + params.sigma2, params)


def clique_map_derivative(beta, params):
    """``f'(beta) = g'(beta + sigma^2)`` with ``g'(x) = y^2 (y - (n-2) x)(n x + y) / D^2``."""
    return shifted_map_derivative(np.asarray(beta, dtype=float) + params.sigma2, params)


def shifted_map(x, params):
    """``g(x) = f(x - sigma^2)``, defined for any ``x >= 0``."""
    y = params.y
    x = np.asarray(x, dtype=float)
    out = x * y * (x + y) / _map_den(x, params)
    return out if out.ndim else float(out)


def shifted_map_derivative(x, params):
    n, y = params.n, params.y
    x = np.asarray(x, dtype=float)
    out = y ** 2 * (y - (n - 2) * x) * (n * x + y) / _map_den(x, params) ** 2
    return out if out.ndim else float(out)


def contraction_constant(params):
    """``max(f'(0), 1/27)``, an upper bound on ``|f'|`` over ``beta >= 0``."""
    return max(float(clique_map_derivative(0.0, params)), 1.0 / 27.0)


def clique_weights(beta, params):
    """Best-response measurement weights ``a_i = x / (tau_i^2 + x)`` with ``x = beta + sigma^2``."""
    x = float(beta) + params.sigma2
    return x / (params.tau2 + x)


def clique_covariance(beta, params):
    """``C(beta) = A^2 T + (beta + sigma^2)(1 - a)(1 - a)'``, the covariance after one best response."""
    x = float(beta) + params.sigma2
    a = clique_weights(beta, params)
    return _sym(np.diag(a ** 2 * params.tau2) + x * np.outer(1.0 - a, 1.0 - a))


def clique_variances(beta, params):
    """Diagonal of :func:`clique_covariance` without forming the matrix."""
    return fused_variance(float(beta) + params.sigma2, params.tau2)


def clique_beta_woodbury(beta, params):
    """``1 / (1' C(beta)^-1 1)`` through the rank-one Woodbury identity (dense route)."""
    x = float(beta) + params.sigma2
    a = clique_weights(beta, params)
    u = np.sqrt(x) * (1.0 - a)
    c_inv = woodbury_inverse(np.diag(a ** 2 * params.tau2), u[:, None], np.eye(1), u[None, :])
    return 1.0 / float(c_inv.sum())


# --- penultimate prediction ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PenultimateState:
    """Complete-graph penultimate prediction after round ``t``.

    ``V`` is the variance of the shared remembered estimate's error (the
    full-information estimate of S(t)); ``K`` the Kalman gain and ``k`` the
    per-agent weights on the remembered value used in round ``t``.
    """

    V: float
    K: float
    k: np.ndarray
    t: int = 0

    def __post_init__(self):
        k = np.array(self.k, dtype=float)
        k.setflags(write=False)
        object.__setattr__(self, "k", k)


def penultimate_initial(params, c0=None):
    """Round-0 state: the remembered value is uninformative, so V(0) is the pooled variance of Y(0)."""
    state = initial_state(params, c0)
    return PenultimateState(V=state.beta, K=0.0, k=np.zeros(params.n), t=0)


def penultimate_step(state, params):
    """Advance one round; returns ``(next_state, per_agent_variances)``.

    Valid on the complete graph, where every agent's remembered value equals
    the full-information estimate of the previous state.
    """
    if state.k.shape != (params.n,):
        raise StructuralError(f"state has {state.k.shape[0]} agents, params n={params.n}")
    prior = state.V + params.sigma2
    ts2 = params.tau_star2
    gain = prior / (prior + ts2)
    v_next = prior * ts2 / (prior + ts2)
    k = params.tau2 / (prior + params.tau2)
    variances = fused_variance(prior, params.tau2)
    return PenultimateState(V=v_next, K=gain, k=k, t=state.t + 1), variances


def penultimate_trajectory(params, rounds, c0=None):
    """Per-agent variances for rounds 1..rounds, shape ``(rounds, n)``."""
    state = penultimate_initial(params, c0)
    out = np.empty((rounds, params.n))
    for r in range(rounds):
        state, out[r] = penultimate_step(state, params)
    return out


@dataclass(frozen=True, eq=False)
class NetworkPenultimateState:
    """Joint covariance of ``(R(t) - S(t), Y(t) - S(t))`` for penultimate prediction on any graph.

    ``gamma`` is 2n x 2n with the remembered values first. At ``t = 0`` the
    remembered values are uninformative and their block is ignored.
    """

    gamma: np.ndarray
    t: int = 0

    @property
    def n(self):
        return self.gamma.shape[0] // 2

    @property
    def c(self):
        n = self.n
        return self.gamma[n:, n:]

    @property
    def covariance(self):
        return CovarianceState(self.c, self.t)


@dataclass(frozen=True, eq=False)
class NetworkPenultimateStep:
    """Weights chosen in one round and the resulting state.

    ``r_self[i]`` weights R_i(t-1), ``r_nbr[i, j]`` weights Y_j(t-1) in R_i(t);
    ``k[i]`` weights R_i(t) in Y_i(t) (the rest goes on M_i(t)).
    """

    r_self: np.ndarray
    r_nbr: np.ndarray
    k: np.ndarray
    r_variance: np.ndarray
    next: NetworkPenultimateState


def network_penultimate_initial(params, c0=None):
    state = initial_state(params, c0)
    n = params.n
    gamma = np.zeros((2 * n, 2 * n))
    gamma[n:, n:] = state.c
    return NetworkPenultimateState(gamma, 0)


def network_penultimate_step(state, graph, params):
    """One round of penultimate prediction on an arbitrary graph.

    Agent i forms R_i(t), the MVULE of S(t-1) from R_i(t-1) and its
    neighbors' Y(t-1), then fuses it with M_i(t). On the complete graph this
    reproduces :func:`penultimate_step`; elsewhere no optimality is claimed.
    """
    n = state.n
    if graph.n != n or params.n != n:
        raise StructuralError(f"dimension mismatch: state n={n}, graph n={graph.n}, params n={params.n}")
    g = state.gamma
    weights = np.zeros((n, 2 * n))
    r_var = np.empty(n)
    for i in range(n):
        idx = n + graph.neighbors(i)
        if state.t > 0:
            idx = np.concatenate(([i], idx))
        try:
            res = mvule_weights(g[np.ix_(idx, idx)])
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"agent {i}: degenerate inputs: {exc}", agent=i) from exc
        weights[i, idx] = res.weights
        r_var[i] = res.variance
    prior = r_var + params.sigma2  # Var(R_i(t) - S(t))
    k = params.tau2 / (prior + params.tau2)
    lin = np.vstack([weights, k[:, None] * weights])
    drift = np.concatenate([np.ones(n), k])
    meas = np.concatenate([np.zeros(n), 1.0 - k])
    gamma = (lin @ g @ lin.T + params.sigma2 * np.outer(drift, drift)
             + np.diag(meas ** 2 * np.concatenate([params.tau2, params.tau2])))
    nxt = NetworkPenultimateState(_sym(gamma), state.t + 1)
    return NetworkPenultimateStep(weights[:, :n].diagonal().copy(), weights[:, n:].copy(), k, r_var, nxt)


# --- full-information oracle ---------------------------------------------------------------


def full_information_covariance(params, c0, t, agent):
    """Error covariance, relative to S(t), of Y(0), every M_j(s) for 0 < s < t, and M_agent(t).

    Built directly from the independence of the increments X and the
    measurement noises D; this is the brute-force input of :func:`kalman_oracle`.
    """
    n = params.n
    # items: Y_j(0) for every j, M_j(s) for 0 < s < t and every j, then M_agent(t)
    rounds = np.concatenate([np.repeat(np.arange(t), n), [t]])
    agents = np.concatenate([np.tile(np.arange(n), t), [agent]])
    # shared drift X(max(su, sv)) .. X(t-1)
    cov = (t - np.maximum.outer(rounds, rounds)) * params.sigma2
    cov[:n, :n] += c0
    meas = np.arange(n, rounds.size)
    cov[meas, meas] += params.tau2[agents[meas]]
    return cov


def kalman_oracle(params, c0=None, t=1, max_dim=ORACLE_MAX_DIM):
    """Full-information optimal variances ``Var(Z_i(s) - S(s))`` for rounds ``s = 1..t``.

    ``Z_i(s)`` is the MVULE of S(s) given Y(0), all agents' measurements
    before round s and agent i's own measurement at round s. Returns an
    array of shape ``(t, n)``.
    """
    if t < 1:
        raise ParameterError(f"t must be >= 1, got {t}")
    n = params.n
    if n * t + 1 > max_dim:
        raise CapacityError(f"oracle would build a {n * t + 1}-dimensional covariance (cap {max_dim})")
    c0 = initial_state(params, c0).c
    out = np.empty((t, n))
    for s in range(1, t + 1):
        for i in range(n):
            out[s - 1, i] = mvule_weights(full_information_covariance(params, c0, s, i)).variance
    return out


# --- trajectories -------------------------------------------------------------------------


def fixed_response_trajectory(state, rule, params, rounds):
    states = []
    for _ in range(rounds):
        state = covariance_step(state, rule, params)
        states.append(state)
    return states


def best_response_trajectory(state, graph, params, rounds):
    steps = []
    for _ in range(rounds):
        step = best_response_step(state, graph, params)
        steps.append(step)
        state = step.next
    return steps


def network_penultimate_trajectory(params, graph, rounds, c0=None):
    state = network_penultimate_initial(params, c0)
    steps = []
    for _ in range(rounds):
        step = network_penultimate_step(state, graph, params)
        steps.append(step)
        state = step.next
    return steps

