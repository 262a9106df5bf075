import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import central_difference, relative_error
from kvtp import numerics as nx

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestCosine:
    def test_self_similarity(self):
        assert nx.cosine_similarity([3, 4], [3, 4]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert nx.cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_diagonal(self):
        assert nx.cosine_similarity([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)

    def test_zero_norm_raises(self):
        with pytest.raises(ValueError, match="zero-norm"):
            nx.cosine_similarity([0, 0], [1, 0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            nx.cosine_similarity([1, 0, 0], [1, 0])

    @given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
    def test_bounded(self, u, v):
        assume(np.linalg.norm(u) > 1e-6 and np.linalg.norm(v) > 1e-6)
        assert -1.0 <= nx.cosine_similarity(u, v) <= 1.0


class TestSoftmax:
    def test_constant_input(self):
        np.testing.assert_allclose(nx.softmax([7.0, 7.0, 7.0]), [1 / 3] * 3, atol=1e-15)

    def test_spike(self):
        np.testing.assert_allclose(nx.softmax([0, 0, 5, 0]), [float(v) for v in oracles.mp_softmax([0, 0, 5, 0])], atol=1e-15)
        np.testing.assert_allclose(nx.softmax([0, 0, 5, 0]), [0.0066044458, 0.0066044458, 0.9801866627, 0.0066044458], atol=1e-9)

    def test_log_three(self):
        np.testing.assert_allclose(nx.softmax([0, math.log(3)]), [0.25, 0.75], atol=1e-15)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_bad_temperature(self, t):
        with pytest.raises(ValueError):
            nx.softmax([1, 2], t)

    def test_large_logits_stay_finite(self):
        out = nx.softmax([1000.0, 999.0, -1000.0])
        assert np.all(np.isfinite(out))
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    @given(arrays(np.float64, st.integers(1, 12), elements=finite), finite, st.floats(0.05, 20))
    def test_shift_invariance(self, x, c, t):
        np.testing.assert_allclose(nx.softmax(x + c, t), nx.softmax(x, t), atol=1e-12)

    @given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(0.05, 20))
    def test_sums_to_one(self, x, t):
        assert nx.softmax(x, t).sum() == pytest.approx(1.0, abs=1e-12)

    @given(arrays(np.float64, st.integers(2, 10), elements=finite, unique=True))
    def test_cold_limit_is_argmax(self, x):
        gaps = np.diff(np.sort(x))
        assume(gaps.min() > 1e-3)
        out = nx.softmax(x, 1e-6)
        expected = np.zeros_like(x)
        expected[np.argmax(x)] = 1.0
        np.testing.assert_allclose(out, expected, atol=1e-12)

    # first-order deviation is (x_i - mean) / (N T), so a unit-bounded input
    # stays inside 1e-6 at T = 1e6 with room to spare
    @given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-1, 1)))
    def test_hot_limit_is_uniform(self, x):
        out = nx.softmax(x, 1e6)
        assert np.max(np.abs(out - 1 / x.size)) <= 1e-6

    @given(arrays(np.float64, st.integers(2, 8), elements=finite), st.integers(0, 7), st.floats(0.01, 5))
    def test_monotone(self, x, i, bump):
        i = i % x.size
        y = x.copy()
        y[i] += bump
        assert nx.softmax(y)[i] >= nx.softmax(x)[i]


class TestCrossAttention:
    def test_single_row(self):
        r = np.array([[0.3, -2.0, 1.5]])
        np.testing.assert_array_equal(nx.cross_attention([1.0, 2.0, 3.0], r, r, 0.7, 3), r[0])

    def test_identical_values(self):
        keys = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
        values = np.tile([2.0, -1.0], (3, 1))
        np.testing.assert_allclose(nx.cross_attention([0.3, 0.9], keys, values, 1.0, 2), [2.0, -1.0], atol=1e-15)

    def test_two_rows_worked_value(self):
        rows = np.eye(2)
        mpmath.mp.dps = 30
        w = float(mpmath.e ** (1 / mpmath.sqrt(2)) / (mpmath.e ** (1 / mpmath.sqrt(2)) + 1))
        out = nx.cross_attention([1.0, 0.0], rows, rows, 1.0, 2)
        np.testing.assert_allclose(out, [w, 1 - w], atol=1e-12)
        np.testing.assert_allclose(out, [0.66976, 0.33024], atol=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nx.cross_attention([1.0, 0.0], np.eye(3), np.eye(3), 1.0, 2)
        with pytest.raises(ValueError):
            nx.cross_attention([1.0, 0.0], np.eye(2), np.ones((3, 2)), 1.0, 2)

    @given(
        arrays(np.float64, 3, elements=st.floats(-3, 3)),
        arrays(np.float64, (4, 3), elements=st.floats(-3, 3)),
        arrays(np.float64, (4, 3), elements=st.floats(-3, 3)),
        st.floats(0.1, 5),
    )
    def test_convex_hull(self, q, k, v, t):
        out = nx.cross_attention(q, k, v, t, 3)
        assert np.all(out >= v.min(axis=0) - 1e-12)
        assert np.all(out <= v.max(axis=0) + 1e-12)

    def test_masked_batch_matches_single_queries(self, rng):
        q = rng.standard_normal((5, 3))
        k = rng.standard_normal((5, 3))
        v = rng.standard_normal((5, 3))
        mask = np.zeros((5, 5), dtype=bool)
        mask[:3, :3] = True
        mask[3:, 3:] = True
        out, _ = nx.attention(q, k, v, 0.8, 3, mask)
        for i in range(5):
            blk = slice(0, 3) if i < 3 else slice(3, 5)
            np.testing.assert_allclose(out[i], nx.cross_attention(q[i], k[blk], v[blk], 0.8, 3), atol=1e-14)


class TestCrossAttentionBackward:
    def test_zero_upstream(self, rng):
        q, k, v = rng.standard_normal(4), rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        g = nx.cross_attention_backward(q, k, v, 1.3, 4, np.zeros(4))
        for arr in (g.query, g.keys, g.values):
            assert not np.any(arr)
        assert g.temperature == 0.0

    def test_single_row_temperature_gradient(self, rng):
        q, r = rng.standard_normal(4), rng.standard_normal((1, 4))
        g = nx.cross_attention_backward(q, r, r, 0.5, 4, rng.standard_normal(4))
        assert g.temperature == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        q, k, v = rng.standard_normal(4), rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        t, up = 0.9, rng.standard_normal(4)
        g = nx.cross_attention_backward(q, k, v, t, 4, up)

        def f(q=q, k=k, v=v, t=t):
            return float(up @ nx.cross_attention(q, k, v, t, 4))

        checks = [
            (g.query, central_difference(lambda x: f(q=x), q)),
            (g.keys, central_difference(lambda x: f(k=x), k)),
            (g.values, central_difference(lambda x: f(v=x), v)),
            (g.temperature, central_difference(lambda x: f(t=float(x[0])), np.array([t]))[0]),
        ]
        for analytic, numeric in checks:
            assert np.max(relative_error(analytic, numeric, floor=1e-6)) <= 1e-6

    def test_masked_backward_matches_finite_differences(self, rng):
        q, k, v = (rng.standard_normal((4, 3)) for _ in range(3))
        mask = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]], dtype=bool)
        up = rng.standard_normal((4, 3))
        _, cache = nx.attention(q, k, v, 1.1, 3, mask)
        gq, gk, gv, gt = nx.attention_backward(cache, up)

        def f(q=q, k=k, v=v, t=1.1):
            return float(np.sum(up * nx.attention(q, k, v, t, 3, mask)[0]))

        assert np.max(relative_error(gq, central_difference(lambda x: f(q=x), q), 1e-6)) <= 1e-6
        assert np.max(relative_error(gk, central_difference(lambda x: f(k=x), k), 1e-6)) <= 1e-6
        assert np.max(relative_error(gv, central_difference(lambda x: f(v=x), v), 1e-6)) <= 1e-6
        num_t = central_difference(lambda x: f(t=float(x[0])), np.array([1.1]))[0]
        assert relative_error(gt, num_t, 1e-6) <= 1e-6


def test_normalize_rows_backward(rng):
    m = rng.standard_normal((3, 4))
    up = rng.standard_normal((3, 4))
    numeric = central_difference(lambda x: float(np.sum(up * nx.normalize_rows(x))), m)
    assert np.max(relative_error(nx.normalize_rows_backward(m, up), numeric, 1e-6)) <= 1e-6


def test_cosine_rows_backward(rng):
    m, v, up = rng.standard_normal((3, 4)), rng.standard_normal(4), rng.standard_normal(3)
    numeric = central_difference(lambda x: float(up @ nx.cosine_rows(x, v)), m)
    assert np.max(relative_error(nx.cosine_rows_backward(m, v, up), numeric, 1e-6)) <= 1e-6


def test_log_sigmoid_stable():
    z = np.array([-800.0, -5.0, 0.0, 5.0, 800.0])
    out = nx.log_sigmoid(z)
    assert np.all(np.isfinite(out))
    assert out[2] == pytest.approx(-math.log(2))
    assert out[0] == pytest.approx(-800.0)
    np.testing.assert_allclose(nx.sigmoid(z), [0.0, 1 / (1 + math.exp(5)), 0.5, 1 / (1 + math.exp(-5)), 1.0])
