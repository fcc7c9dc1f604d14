"""Trajectory-level simulation of the state, measurements and estimates.

Every random number is a pure function of ``(seed, trajectory, round, agent,
role)``: a SplitMix64-style integer hash turns the key into 53 uniform bits.
Trajectories are therefore bit-identical however the work is split, and the
moment sums are merged in a fixed chunk order, so results do not depend on
the number of workers either.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .dynamics import best_response_step, covariance_step, network_penultimate_trajectory
from .errors import CapacityError, ParameterError, StructuralError
from .model import LinearRule, ModelParams, SocialGraph, initial_state, validate_rule

MODELS = ("fixed", "best", "penultimate")
NOISE_FAMILIES = ("gaussian", "uniform")
# Upper bound on n * horizon * trajectories for one run.
SIMULATION_BUDGET = 10 ** 10
DEFAULT_CHUNK = 8192

# stream roles
_S0, _Y0, _DRIFT, _MEAS = 1, 2, 3, 4

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(h):
    # SplitMix64 finaliser; bijective on uint64
    h = h + _GAMMA
    h = (h ^ (h >> np.uint64(30))) * _M1
    h = (h ^ (h >> np.uint64(27))) * _M2
    return h ^ (h >> np.uint64(31))


def keyed_uniform(seed, trajectories, rnd, role, agents):
    """Uniforms in (0, 1) of shape ``(len(trajectories), agents)`` keyed by the full counter."""
    h = _mix(np.array([seed], dtype=np.uint64))
    h = _mix(h ^ np.asarray(trajectories, dtype=np.uint64))[:, None]
    h = _mix(h ^ np.uint64((int(rnd) << 8) | role))
    h = _mix(h ^ np.arange(agents, dtype=np.uint64)[None, :])
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def keyed_noise(seed, trajectories, rnd, role, agents, family="gaussian"):
    """Zero-mean unit-variance noise from :func:`keyed_uniform`."""
    u = keyed_uniform(seed, trajectories, rnd, role, agents)
    if family == "gaussian":
        return ndtri(u)
    if family == "uniform":
        return np.sqrt(12.0) * (u - 0.5)
    raise ParameterError(f"unknown noise family {family!r}")


@dataclass(frozen=True, eq=False)
class SimulationConfig:
    """What to simulate. ``rule`` is required for the fixed model only.

    ``c0`` is the covariance of the initial estimators' errors (default
    ``diag(tau^2)``); ``s0_mean``/``s0_var`` describe the distribution of S(0).
    ``record`` lists the rounds whose moments are kept (default: all).
    Set ``check_rule=False`` to simulate a rule that breaks the convexity
    constraint on purpose.
    """

    params: ModelParams
    graph: SocialGraph
    model: str
    rule: LinearRule | None = None
    horizon: int = 100
    trajectories: int = 10_000
    seed: int = 0
    noise: str = "gaussian"
    c0: np.ndarray | None = None
    s0_mean: float = 0.0
    s0_var: float = 1.0
    record: tuple | None = None
    chunk_size: int = DEFAULT_CHUNK
    check_rule: bool = True
    budget: int = field(default=SIMULATION_BUDGET, repr=False)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ParameterError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.noise not in NOISE_FAMILIES:
            raise ParameterError(f"noise must be one of {NOISE_FAMILIES}, got {self.noise!r}")
        if self.horizon < 1 or self.trajectories < 1 or self.chunk_size < 1:
            raise ParameterError("horizon, trajectories and chunk_size must be >= 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ParameterError("seed must fit in 64 unsigned bits")
        if self.s0_var < 0:
            raise ParameterError("s0_var must be >= 0")
        if self.graph.n != self.params.n:
            raise StructuralError(f"graph has n={self.graph.n}, params n={self.params.n}")
        if self.model == "fixed":
            if self.rule is None:
                raise ParameterError("the fixed model needs a rule")
            res = validate_rule(self.rule, self.graph)
            if self.check_rule and not res.valid:
                raise ParameterError(f"invalid rule: {res.describe()}")
        if self.record is not None:
            rec = tuple(sorted({int(r) for r in self.record}))
            if not rec or rec[0] < 1 or rec[-1] > self.horizon:
                raise ParameterError(f"recorded rounds must lie in [1, {self.horizon}]")
            object.__setattr__(self, "record", rec)
        work = self.params.n * self.horizon * self.trajectories
        if work > self.budget:
            raise CapacityError(f"n*horizon*trajectories = {work} exceeds the budget {self.budget}")

    @property
    def rounds(self):
        return self.record if self.record is not None else tuple(range(1, self.horizon + 1))


@dataclass(frozen=True, eq=False)
class EmpiricalMoments:
    """Sample moments of the errors ``Y_i(t) - S(t)`` over all trajectories at round ``t``.

    ``cov_error`` is the sample covariance; ``stderr[i, j]`` the standard error
    of the sample second moment of ``(e_i, e_j)``, ``mean_stderr[i]`` that of
    the mean.
    """

    t: int
    mean_error: np.ndarray
    cov_error: np.ndarray
    stderr: np.ndarray
    mean_stderr: np.ndarray
    count: int


def _moments(t, count, s1, s2, s4):
    mean = s1 / count
    raw2 = s2 / count
    cov = (raw2 - np.outer(mean, mean)) * (count / max(count - 1, 1))
    var_prod = np.maximum(s4 / count - raw2 ** 2, 0.0)
    stderr = np.sqrt(var_prod / count)
    mean_se = np.sqrt(np.maximum(np.diag(cov), 0.0) / count)
    return EmpiricalMoments(t, mean, cov, stderr, mean_se, count)


@dataclass(frozen=True, eq=False)
class _Plan:
    """Deterministic per-round weights and the analytic covariances they imply."""

    kind: str
    a: list  # fixed / best: measurement weights per round
    p: list
    r_self: list  # penultimate
    r_nbr: list
    k: list
    analytic: list  # C(t) for t = 1..horizon
    r_variance: list  # penultimate: Var(R_i(t) - S(t-1))


def _plan(config):
    params, graph = config.params, config.graph
    state = initial_state(params, config.c0)
    a, p, r_self, r_nbr, k, analytic, r_var = [], [], [], [], [], [], []
    if config.model == "fixed":
        for _ in range(config.horizon):
            state = covariance_step(state, config.rule, params)
            a.append(config.rule.a)
            p.append(config.rule.p)
            analytic.append(state.c)
    elif config.model == "best":
        for _ in range(config.horizon):
            step = best_response_step(state, graph, params)
            state = step.next
            a.append(step.rule.a)
            p.append(step.rule.p)
            analytic.append(state.c)
    else:
        for step in network_penultimate_trajectory(params, graph, config.horizon, config.c0):
            r_self.append(step.r_self)
            r_nbr.append(step.r_nbr)
            k.append(step.k)
            analytic.append(step.next.c.copy())
            r_var.append(step.r_variance)
    return _Plan(config.model, a, p, r_self, r_nbr, k, analytic, r_var)


def _c0_factor(config):
    c0 = initial_state(config.params, config.c0).c
    lam, vecs = np.linalg.eigh(c0)
    return vecs * np.sqrt(np.clip(lam, 0.0, None))


def _run_chunk(config, plan, factor, start, stop):
    """Simulate trajectories ``start..stop-1``; return moment sums for every recorded round."""
    n = config.params.n
    seed = int(config.seed)
    fam = config.noise
    idx = np.arange(start, stop, dtype=np.uint64)
    tau = config.params.tau
    sigma = config.params.sigma
    rounds = config.rounds
    want = {t: j for j, t in enumerate(rounds)}
    nr = len(rounds)
    s1 = np.zeros((nr, n))
    s2 = np.zeros((nr, n, n))
    s4 = np.zeros((nr, n, n))
    r1 = np.zeros((nr, n))
    r2 = np.zeros((nr, n))

    s = config.s0_mean + np.sqrt(config.s0_var) * keyed_noise(seed, idx, 0, _S0, 1, fam)[:, 0]
    y = s[:, None] + keyed_noise(seed, idx, 0, _Y0, n, fam) @ factor.T
    r = np.zeros_like(y)
    for t in range(1, config.horizon + 1):
        s_prev = s
        s = s + sigma * keyed_noise(seed, idx, t - 1, _DRIFT, 1, fam)[:, 0]
        m = s[:, None] + tau * keyed_noise(seed, idx, t, _MEAS, n, fam)
        if plan.kind == "penultimate":
            r = plan.r_self[t - 1] * r + y @ plan.r_nbr[t - 1].T
            k = plan.k[t - 1]
            y = k * r + (1.0 - k) * m
        else:
            y = plan.a[t - 1] * m + y @ plan.p[t - 1].T
        j = want.get(t)
        if j is not None:
            e = y - s[:, None]
            prod = e[:, :, None] * e[:, None, :]
            s1[j] = e.sum(axis=0)
            s2[j] = prod.sum(axis=0)
            s4[j] = (prod * prod).sum(axis=0)
            if plan.kind == "penultimate":
                er = r - s_prev[:, None]
                r1[j] = er.sum(axis=0)
                r2[j] = (er * er).sum(axis=0)
    return s1, s2, s4, r1, r2


@dataclass(frozen=True, eq=False)
class SimulationResult:
    """Empirical moments per recorded round next to the analytic covariance for that round.

    For penultimate prediction ``r_mean``/``r_mean_stderr`` describe the
    remembered values' errors ``R_i(t) - S(t-1)`` and ``r_variance`` their
    analytic variance.
    """

    config: SimulationConfig
    rounds: tuple
    moments: list
    analytic: list
    r_mean: np.ndarray | None = None
    r_mean_stderr: np.ndarray | None = None
    r_empirical_var: np.ndarray | None = None
    r_variance: np.ndarray | None = None

    def z_scores(self, entries="all"):
        """``(empirical - analytic) / stderr`` for every checked covariance entry of every round."""
        out = []
        for mom, c in zip(self.moments, self.analytic):
            n = c.shape[0]
            sel = np.triu(np.ones((n, n), dtype=bool)) if entries == "all" else np.eye(n, dtype=bool)
            se = np.where(mom.stderr > 0, mom.stderr, np.inf)
            out.append(((mom.cov_error - c) / se)[sel])
        return np.concatenate(out)

    def concordance(self, k=3.0, entries="all"):
        """Fraction of checked entries within ``k`` standard errors of the analytic value."""
        z = self.z_scores(entries)
        return float(np.mean(np.abs(z) <= k))


def simulate(config, workers=1):
    """Run the configured Monte Carlo experiment.

    Best-response and penultimate agents use the analytically propagated
    covariances to choose their weights, as they are assumed to know them.
    """
    plan = _plan(config)
    factor = _c0_factor(config)
    bounds = [(lo, min(lo + config.chunk_size, config.trajectories))
              for lo in range(0, config.trajectories, config.chunk_size)]

    def work(b):
        return _run_chunk(config, plan, factor, *b)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    totals = [np.zeros_like(x) for x in parts[0]]
    for part in parts:  # fixed chunk order: identical sums for any worker count
        for acc, x in zip(totals, part):
            acc += x
    s1, s2, s4, r1, r2 = totals
    count = config.trajectories
    rounds = config.rounds
    moments = [_moments(t, count, s1[j], s2[j], s4[j]) for j, t in enumerate(rounds)]
    analytic = [plan.analytic[t - 1] for t in rounds]
    extra = {}
    if plan.kind == "penultimate":
        r_mean = r1 / count
        r_var = (r2 / count - r_mean ** 2) * (count / max(count - 1, 1))
        extra = dict(
            r_mean=r_mean,
            r_mean_stderr=np.sqrt(np.maximum(r_var, 0.0) / count),
            r_empirical_var=r_var,
            r_variance=np.array([plan.r_variance[t - 1] for t in rounds]),
        )
    return SimulationResult(config, rounds, moments, analytic, **extra)


@dataclass(frozen=True, eq=False)
class UnbiasednessReport:
    """Mean errors per recorded round with their standard errors.

    ``passed`` when every mean error is within ``k`` standard errors of zero.
    """

    rounds: tuple
    mean_error: np.ndarray
    stderr: np.ndarray
    r_mean_error: np.ndarray | None
    r_stderr: np.ndarray | None
    k: float

    @property
    def max_abs_z(self):
        z = np.abs(self.mean_error) / np.where(self.stderr > 0, self.stderr, np.inf)
        if self.r_mean_error is not None:
            zr = np.abs(self.r_mean_error) / np.where(self.r_stderr > 0, self.r_stderr, np.inf)
            return float(max(z.max(), zr.max()))
        return float(z.max())

    @property
    def passed(self):
        return self.max_abs_z < self.k


def unbiasedness_check(config, k=4.0, workers=1):
    """Simulate and test that ``E[Y_i(t) - S(t)] = 0`` (and ``E[R_i(t) - S(t-1)] = 0``)."""
    res = simulate(config, workers=workers)
    mean = np.array([m.mean_error for m in res.moments])
    se = np.array([m.mean_stderr for m in res.moments])
    return UnbiasednessReport(res.rounds, mean, se, res.r_mean, res.r_mean_stderr, k)
