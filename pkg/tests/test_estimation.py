import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_spd
from social_learning import (
    DegenerateInputError,
    ParameterError,
    StructuralError,
    fuse_two_independent,
    mvule_weights,
    woodbury_inverse,
)
from social_learning.estimation import fused_variance

seeds = st.integers(0, 2 ** 32 - 1)


def grid_min_variance(c):
    """Minimum of w'Cw over {w : sum w = 1} in 3 dimensions by a coarse-then-fine grid."""
    def search(c1, c2, half, step):
        g1 = np.arange(c1 - half, c1 + half + step / 2, step)
        g2 = np.arange(c2 - half, c2 + half + step / 2, step)
        w1, w2 = np.meshgrid(g1, g2, indexing="ij")
        w = np.stack([w1, w2, 1 - w1 - w2], axis=-1)
        v = np.einsum("...i,ij,...j->...", w, c, w)
        k = np.unravel_index(np.argmin(v), v.shape)
        return w1[k], w2[k], v[k]

    w1, w2, _ = search(0.0, 0.0, 6.0, 0.05)
    w1, w2, _ = search(w1, w2, 0.1, 0.002)
    return search(w1, w2, 0.004, 0.0001)[2]


class TestMvule:
    def test_identity(self):
        res = mvule_weights(np.eye(2))
        assert np.allclose(res.weights, [0.5, 0.5])
        assert res.variance == pytest.approx(0.5)

    def test_diagonal(self):
        res = mvule_weights(np.diag([1.0, 3.0]))
        assert np.allclose(res.weights, [0.75, 0.25])
        assert res.variance == pytest.approx(0.75)

    def test_rank_one_all_combinations_equal(self):
        c = np.ones((2, 2))
        res = mvule_weights(c)
        assert res.weights.sum() == pytest.approx(1.0)
        assert res.variance == pytest.approx(1.0, abs=1e-12)
        # every affine combination has the same variance
        for w0 in np.linspace(-2, 3, 101):
            w = np.array([w0, 1 - w0])
            assert w @ c @ w == pytest.approx(1.0, abs=1e-12)

    def test_exact_estimator_found(self):
        # the second estimator is exact: the minimum is 0 and must be found
        res = mvule_weights(np.diag([1.0, 0.0]))
        assert res.variance == pytest.approx(0.0, abs=1e-15)
        assert np.allclose(res.weights, [0.0, 1.0])

    def test_negative_weights_allowed(self):
        # C^-1 1 is proportional to (2 - 1.2, 1 - 1.2): short the noisier estimator
        c = np.array([[1.0, 1.2], [1.2, 2.0]])
        res = mvule_weights(c)
        assert np.allclose(res.weights, [4 / 3, -1 / 3])
        assert res.variance == pytest.approx(0.56 / 0.6)

    def test_errors(self):
        with pytest.raises(StructuralError):
            mvule_weights(np.ones(3))
        with pytest.raises(DegenerateInputError):
            mvule_weights(np.array([[1.0, 0.0], [0.0, np.nan]]))
        with pytest.raises(DegenerateInputError):
            mvule_weights(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_scale_invariance(self):
        c = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 4.0]])
        for s in (1e-8, 1.0, 1e8):
            res = mvule_weights(s * c)
            assert np.allclose(res.weights, mvule_weights(c).weights, atol=1e-10)
            assert res.variance == pytest.approx(s * mvule_weights(c).variance, rel=1e-10)

    @given(st.integers(1, 7), seeds)
    def test_invariants(self, m, seed):
        rng = np.random.default_rng(seed)
        c = random_spd(rng, m, cond=1e3)
        res = mvule_weights(c)
        assert res.weights.sum() == pytest.approx(1.0, abs=1e-10)
        assert res.variance == pytest.approx(res.weights @ c @ res.weights, abs=1e-10)
        assert res.variance <= np.min(np.diag(c)) + 1e-12
        assert res.variance >= 0

    @given(st.integers(1, 6), seeds)
    def test_diagonal_formula(self, m, seed):
        d = np.random.default_rng(seed).uniform(0.1, 10, m)
        res = mvule_weights(np.diag(d))
        assert np.allclose(res.weights, (1 / d) / (1 / d).sum())
        assert res.variance == pytest.approx(1 / (1 / d).sum())

    @given(seeds)
    def test_singular_still_minimal(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((4, 2))
        c = f @ f.T
        res = mvule_weights(c)
        assert res.weights.sum() == pytest.approx(1.0, abs=1e-10)
        # no affine direction can improve on the returned variance
        grad = 2 * c @ res.weights
        assert np.allclose(grad - grad.mean(), 0, atol=1e-8 * max(1, np.abs(c).max()))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_grid_search(self, seed):
        c = random_spd(np.random.default_rng(seed), 3, cond=5.0)
        best = grid_min_variance(c)
        res = mvule_weights(c)
        assert res.variance <= best + 1e-12
        assert best - res.variance < 1e-4


class TestFusion:
    def test_examples(self):
        r = fuse_two_independent(1, 1)
        assert np.allclose(r.weights, [0.5, 0.5]) and r.variance == pytest.approx(0.5)
        r = fuse_two_independent(1, 3)
        assert np.allclose(r.weights, [0.75, 0.25]) and r.variance == pytest.approx(0.75)
        assert fuse_two_independent(2, 2).variance == pytest.approx(1.0)

    @pytest.mark.parametrize("v", [(0, 1), (1, -1)])
    def test_rejects_nonpositive(self, v):
        with pytest.raises(ParameterError):
            fuse_two_independent(*v)

    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_agrees_with_mvule(self, v1, v2):
        r = fuse_two_independent(v1, v2)
        m = mvule_weights(np.diag([v1, v2]))
        assert np.allclose(r.weights, m.weights)
        assert r.variance == pytest.approx(m.variance)
        assert fused_variance(v1, v2) == pytest.approx(r.variance)

    def test_fused_variance_zero_safe(self):
        assert fused_variance(0.0, 0.0) == 0.0
        assert np.allclose(fused_variance(np.array([0.0, 1.0]), 1.0), [0.0, 0.5])


class TestWoodbury:
    def test_no_update(self):
        assert np.allclose(woodbury_inverse(np.eye(2), np.zeros((2, 1)), np.eye(1), np.zeros((1, 2))), np.eye(2))

    def test_rank_one_2x2(self):
        got = woodbury_inverse(2 * np.eye(2), np.ones((2, 1)), np.eye(1), np.ones((1, 2)))
        want = np.array([[3.0, -1.0], [-1.0, 3.0]]) / 8.0
        assert np.allclose(got, want, atol=1e-15)

    @given(st.integers(1, 8), st.integers(1, 3), seeds)
    def test_matches_direct_inverse(self, n, k, seed):
        rng = np.random.default_rng(seed)
        x = random_spd(rng, n)
        u = rng.standard_normal((n, k))
        y = random_spd(rng, k)
        full = x + u @ y @ u.T
        want = np.linalg.inv(full)
        got = woodbury_inverse(x, u, y, u.T)
        assert np.max(np.abs(got - want)) <= 1e-9 * np.max(np.abs(want))

    def test_singular_inner(self):
        # I - 0.5 * 11' has the zero eigenvalue along 1
        x = np.eye(2)
        u = np.ones((2, 1))
        y = np.array([[-0.5]])
        with pytest.raises(DegenerateInputError):
            woodbury_inverse(x, u, y, u.T)

    def test_singular_x(self):
        with pytest.raises(DegenerateInputError):
            woodbury_inverse(np.zeros((2, 2)), np.ones((2, 1)), np.eye(1), np.ones((1, 2)))
