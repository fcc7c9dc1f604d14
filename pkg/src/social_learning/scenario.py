"""Scenario files: flat ``key = value`` text with dotted keys, one per line.

Example::

    # two agents, best response
    name = n2-best
    params.n = 2
    params.sigma = 1
    params.tau = 1
    graph.kind = complete
    model.kind = best
    horizon = 100
    outputs = trace, steady-state

``params.tau`` takes one value (shared) or a comma list. ``graph.kind =
edges`` reads ``graph.file``, a text file of ``i j`` pairs meaning j is a
neighbor of i (relative paths resolve against the scenario's directory).
Fixed response needs ``rule.kind``: ``uniform`` or ``neighbor_uniform`` with
``rule.alpha``, or ``explicit`` with ``rule.a = a0, a1, ...`` and
``rule.p = row0; row1; ...``. Floats are written with 17 significant digits
so load -> dump -> load is the identity.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ScenarioError, SocialLearningError
from .model import LinearRule, ModelParams, SocialGraph, neighbor_uniform_rule, uniform_clique_rule, validate_rule

GRAPH_KINDS = ("complete", "edges")
MODEL_KINDS = ("fixed", "best", "penultimate")
RULE_KINDS = ("uniform", "neighbor_uniform", "explicit")
NOISE_KINDS = ("gaussian", "uniform")
OUTPUT_KINDS = ("trace", "steady-state", "monte-carlo", "comparison")

# key order used when writing a scenario
KEYS = (
    "name", "params.n", "params.sigma", "params.tau",
    "graph.kind", "graph.file",
    "model.kind", "rule.kind", "rule.alpha", "rule.a", "rule.p",
    "horizon", "tolerance", "max_iters", "seed", "trajectories", "noise", "outputs",
)
REQUIRED = ("params.n", "params.sigma", "params.tau")


def fmt_float(x):
    return format(float(x), ".17g")


def _fmt_list(xs):
    return ", ".join(fmt_float(x) for x in xs)


@dataclass(frozen=True)
class Scenario:
    """A parsed and validated scenario. Build the model objects with :meth:`params`, :meth:`graph`, :meth:`rule`."""

    n: int
    sigma: float
    tau: tuple
    name: str = "scenario"
    graph_kind: str = "complete"
    graph_file: str | None = None
    model: str = "best"
    rule_kind: str | None = None
    alpha: float | None = None
    rule_a: tuple | None = None
    rule_p: tuple | None = None
    horizon: int = 100
    tolerance: float = 1e-12
    max_iters: int = 100_000
    seed: int = 0
    trajectories: int = 10_000
    noise: str = "gaussian"
    outputs: tuple = ("trace", "steady-state")
    edges: tuple = field(default=(), compare=False, repr=False)
    base_dir: str = field(default=".", compare=False, repr=False)

    def params(self):
        tau = self.tau[0] if len(self.tau) == 1 else np.array(self.tau)
        return ModelParams(self.n, self.sigma, tau)

    def graph(self):
        if self.graph_kind == "complete":
            return SocialGraph.complete(self.n)
        return SocialGraph.from_edges(self.n, self.edges)

    def rule(self):
        """The fixed-response rule, or None for the other models."""
        if self.model != "fixed":
            return None
        if self.rule_kind == "uniform":
            return uniform_clique_rule(self.params(), self.alpha)
        if self.rule_kind == "neighbor_uniform":
            return neighbor_uniform_rule(self.graph(), self.alpha)
        return LinearRule(np.array(self.rule_a), np.array(self.rule_p))

    def to_raw(self):
        """Key -> value text, in :data:`KEYS` order, omitting unset optional keys."""
        raw = {
            "name": self.name,
            "params.n": str(self.n),
            "params.sigma": fmt_float(self.sigma),
            "params.tau": _fmt_list(self.tau),
            "graph.kind": self.graph_kind,
        }
        if self.graph_file is not None:
            raw["graph.file"] = self.graph_file
        raw["model.kind"] = self.model
        if self.rule_kind is not None:
            raw["rule.kind"] = self.rule_kind
        if self.alpha is not None:
            raw["rule.alpha"] = fmt_float(self.alpha)
        if self.rule_a is not None:
            raw["rule.a"] = _fmt_list(self.rule_a)
        if self.rule_p is not None:
            raw["rule.p"] = "; ".join(_fmt_list(row) for row in self.rule_p)
        raw.update({
            "horizon": str(self.horizon),
            "tolerance": fmt_float(self.tolerance),
            "max_iters": str(self.max_iters),
            "seed": str(self.seed),
            "trajectories": str(self.trajectories),
            "noise": self.noise,
            "outputs": ", ".join(self.outputs),
        })
        return raw

    def dumps(self):
        return "".join(f"{k} = {v}\n" for k, v in self.to_raw().items())

    def with_value(self, key, text):
        """A copy with one key replaced (given as text); re-validated as a whole."""
        if key not in KEYS:
            raise ScenarioError(f"unknown key {key!r}")
        raw = self.to_raw()
        raw[key] = text
        return from_raw({k: (v, None) for k, v in raw.items()}, base_dir=self.base_dir)


def _split_list(text):
    return [s for s in (part.strip() for part in text.split(",")) if s]


def _parse_line(raw_line, lineno, path):
    line = raw_line.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise ScenarioError(f"expected 'key = value', got {raw_line.strip()!r}", lineno, path)
    key, value = (s.strip() for s in line.split("=", 1))
    if key not in KEYS:
        raise ScenarioError(f"unknown key {key!r}", lineno, path)
    if not value:
        raise ScenarioError(f"empty value for {key!r}", lineno, path)
    return key, value


def loads(text, base_dir=".", path=None):
    """Parse scenario text. Errors are :class:`ScenarioError` with the offending line."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        item = _parse_line(line, lineno, path)
        if item is None:
            continue
        key, value = item
        if key in raw:
            raise ScenarioError(f"duplicate key {key!r} (first set on line {raw[key][1]})", lineno, path)
        raw[key] = (value, lineno)
    return from_raw(raw, base_dir=base_dir, path=path)


def load(path):
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", path=path) from None
    return loads(text, base_dir=os.path.dirname(os.path.abspath(path)), path=path)


def from_raw(raw, base_dir=".", path=None):
    """Build a :class:`Scenario` from ``key -> (text, line)``; ``line`` may be None."""

    def fail(msg, key=None):
        line = raw[key][1] if key in raw else None
        raise ScenarioError(msg, line, path)

    for key in REQUIRED:
        if key not in raw:
            fail(f"missing required key {key!r}")

    def get(key):
        return raw[key][0] if key in raw else None

    def as_int(key, lo=None):
        text = get(key)
        try:
            val = int(text)
        except ValueError:
            fail(f"{key} must be an integer, got {text!r}", key)
        if lo is not None and val < lo:
            fail(f"{key} must be >= {lo}, got {val}", key)
        return val

    def as_float(key):
        text = get(key)
        try:
            val = float(text)
        except ValueError:
            fail(f"{key} must be a number, got {text!r}", key)
        if not np.isfinite(val):
            fail(f"{key} must be finite, got {text!r}", key)
        return val

    def as_floats(key, text=None):
        text = get(key) if text is None else text
        try:
            vals = tuple(float(s) for s in _split_list(text))
        except ValueError:
            fail(f"{key} must be a comma-separated list of numbers, got {text!r}", key)
        if not vals:
            fail(f"{key} is empty", key)
        return vals

    def choice(key, options, default):
        val = get(key)
        if val is None:
            return default
        if val not in options:
            fail(f"{key} must be one of {', '.join(options)}; got {val!r}", key)
        return val

    kw = {}
    if "name" in raw:
        kw["name"] = get("name")
    n = as_int("params.n", 1)
    sigma = as_float("params.sigma")
    tau = as_floats("params.tau")
    if len(tau) not in (1, n):
        fail(f"params.tau has {len(tau)} values, expected 1 or {n}", "params.tau")
    if len(set(tau)) == 1 and len(tau) == n and n > 1:
        tau = tau[:1]
    kw["graph_kind"] = choice("graph.kind", GRAPH_KINDS, "complete")
    kw["model"] = choice("model.kind", MODEL_KINDS, "best")
    for key, attr, lo in (("horizon", "horizon", 1), ("max_iters", "max_iters", 1),
                          ("seed", "seed", 0), ("trajectories", "trajectories", 1)):
        if key in raw:
            kw[attr] = as_int(key, lo)
    if kw.get("seed", 0) >= 2 ** 64:
        fail("seed must fit in 64 unsigned bits", "seed")
    if "tolerance" in raw:
        kw["tolerance"] = as_float("tolerance")
        if kw["tolerance"] <= 0:
            fail("tolerance must be > 0", "tolerance")
    kw["noise"] = choice("noise", NOISE_KINDS, "gaussian")
    if "outputs" in raw:
        outs = tuple(_split_list(get("outputs")))
        bad = [o for o in outs if o not in OUTPUT_KINDS]
        if bad or not outs:
            fail(f"outputs must be drawn from {', '.join(OUTPUT_KINDS)}; got {get('outputs')!r}", "outputs")
        kw["outputs"] = outs

    edges = ()
    if kw["graph_kind"] == "edges":
        if "graph.file" not in raw:
            fail("graph.kind = edges needs graph.file", "graph.kind")
        kw["graph_file"] = get("graph.file")
        edges = _read_edges(os.path.join(base_dir, kw["graph_file"]), n, raw["graph.file"][1], path)
    elif "graph.file" in raw:
        fail("graph.file is only allowed with graph.kind = edges", "graph.file")

    rule_keys = [k for k in ("rule.kind", "rule.alpha", "rule.a", "rule.p") if k in raw]
    if kw["model"] != "fixed":
        if rule_keys:
            fail(f"{rule_keys[0]} is only allowed with model.kind = fixed", rule_keys[0])
    else:
        if "rule.kind" not in raw:
            fail("model.kind = fixed needs rule.kind", "model.kind")
        kind = choice("rule.kind", RULE_KINDS, None)
        kw["rule_kind"] = kind
        if kind == "explicit":
            for key in ("rule.a", "rule.p"):
                if key not in raw:
                    fail(f"rule.kind = explicit needs {key}", "rule.kind")
            if "rule.alpha" in raw:
                fail("rule.alpha is not used by an explicit rule", "rule.alpha")
            a = as_floats("rule.a")
            rows = tuple(as_floats("rule.p", row) for row in get("rule.p").split(";") if row.strip())
            if len(a) != n:
                fail(f"rule.a has {len(a)} entries, expected {n}", "rule.a")
            if len(rows) != n or any(len(r) != n for r in rows):
                fail(f"rule.p must be {n} rows of {n} numbers", "rule.p")
            kw["rule_a"], kw["rule_p"] = a, rows
        else:
            if "rule.alpha" not in raw:
                fail(f"rule.kind = {kind} needs rule.alpha", "rule.kind")
            for key in ("rule.a", "rule.p"):
                if key in raw:
                    fail(f"{key} is only used by an explicit rule", key)
            kw["alpha"] = as_float("rule.alpha")
            if not 0.0 < kw["alpha"] <= 1.0:
                fail(f"rule.alpha must lie in (0, 1], got {kw['alpha']}", "rule.alpha")
        if kind == "uniform" and kw["graph_kind"] != "complete":
            fail("rule.kind = uniform needs graph.kind = complete", "rule.kind")

    try:
        sc = Scenario(n=n, sigma=sigma, tau=tau, edges=edges, base_dir=base_dir, **kw)
        sc.params()
        graph = sc.graph()
        rule = sc.rule()
    except SocialLearningError as exc:
        fail(str(exc), "params.n")
    if rule is not None:
        res = validate_rule(rule, graph)
        if not res.valid:
            anchor = next(k for k in ("rule.a", "rule.p", "rule.alpha", "rule.kind") if k in raw)
            fail(f"rule is not admissible: {res.describe()}", anchor)
    return sc


def _read_edges(file_path, n, line, path):
    try:
        with open(file_path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ScenarioError(f"graph.file {file_path!r}: {exc.strerror}", line, path) from None
    edges = []
    for k, text in enumerate(lines, start=1):
        body = text.split("#", 1)[0].split()
        if not body:
            continue
        try:
            i, j = (int(v) for v in body)
        except ValueError:
            raise ScenarioError(f"expected two integers 'i j', got {text.strip()!r}", k, file_path) from None
        if not (0 <= i < n and 0 <= j < n):
            raise ScenarioError(f"edge ({i}, {j}) has an index outside [0, {n})", k, file_path)
        edges.append((i, j))
    return tuple(edges)

