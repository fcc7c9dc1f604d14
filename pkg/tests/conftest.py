import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def assert_covariance(c, tol=1e-10):
    """Shared check for every emitted covariance: finite, symmetric, PSD up to slack."""
    c = np.asarray(c)
    assert np.all(np.isfinite(c))
    scale = max(1.0, float(np.max(np.abs(c))))
    assert np.max(np.abs(c - c.T)) <= 1e-12 * scale
    assert np.linalg.eigvalsh(c)[0] >= -tol * scale


def random_spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.exp(rng.uniform(0, np.log(cond), n))
    return (q * lam) @ q.T


def random_rule(rng, graph, a_low=0.05):
    """A valid nonnegative rule supported on ``graph``."""
    from social_learning import LinearRule

    n = graph.n
    a = rng.uniform(a_low, 1.0, n)
    w = rng.uniform(0.0, 1.0, (n, n)) * graph.mask
    w = w / w.sum(axis=1, keepdims=True)
    return LinearRule(a, (1.0 - a)[:, None] * w)


def random_graph(rng, n, density=0.5):
    from social_learning import SocialGraph

    return SocialGraph(rng.uniform(size=(n, n)) < density)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        terminalreporter.write_line(results[k])
