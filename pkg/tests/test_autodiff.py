import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parttrack import autodiff as ad
from parttrack.autodiff import NumericError, RngState, Tensor


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_closed_form(self):
        # softmax([ln 2, 0]) = [2/3, 1/3] by hand
        out = ad.softmax(Tensor([np.log(2.0), 0.0]))
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-15)

    def test_extreme_magnitude_no_overflow(self):
        out = ad.softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_non_finite_input_rejected(self):
        with pytest.raises(NumericError):
            ad.softmax(Tensor([np.nan, 0.0]))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(min_value=-500, max_value=500), min_size=1,
                    max_size=12))
    def test_probability_vector(self, values):
        out = ad.softmax(Tensor(values)).data
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) <= 1e-9

    def test_axis(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_allclose(ad.softmax(x, axis=0).data.sum(axis=0), 1.0)
        np.testing.assert_allclose(ad.softmax(x, axis=1).data.sum(axis=1), 1.0)


class TestGradCheck:
    def test_polynomial(self):
        # f = sum(x^2), analytic grad [2, 4]
        x = Tensor([1.0, 2.0])
        err = ad.grad_check(lambda t: ad.sum_(ad.mul(t, t)), x, eps=1e-5)
        assert err < 1e-8
        work = Tensor(x.data, requires_grad=True)
        ad.sum_(ad.mul(work, work)).backward()
        np.testing.assert_allclose(work.grad, [2.0, 4.0])

    def test_softmax_dot(self):
        w = ad.constant(np.array([0.3, -0.7, 1.1]))
        x = Tensor([0.2, -0.4, 0.9])
        err = ad.grad_check(lambda t: ad.sum_(ad.mul(ad.softmax(t), w)), x,
                            eps=1e-5)
        assert err < 1e-6

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            ad.grad_check(lambda t: t, Tensor([1.0, 2.0]))

    def test_eps_bounds(self):
        with pytest.raises(ValueError, match="eps"):
            ad.grad_check(lambda t: ad.sum_(t), Tensor([1.0]), eps=1e-2)


class TestGumbelSoftmax:
    def test_hard_one_hot_under_symmetry(self):
        out = ad.gumbel_softmax(Tensor([0.0, 0.0, 0.0]), 1.0, True, RngState(0))
        assert out.data.sum() == 1.0
        assert np.all(np.isin(out.data, [0.0, 1.0]))

    def test_dominant_logit_concentration(self):
        # Monte-Carlo estimate of the Gumbel-argmax probability at margin 10
        rng = RngState(42)
        hits = 0
        for _ in range(1000):
            out = ad.gumbel_softmax(Tensor([10.0, 0.0, 0.0]), 1.0, True, rng)
            hits += int(out.data[0] == 1.0)
        assert hits / 1000 >= 0.99

    def test_high_temperature_limit(self):
        # tau -> inf flattens toward uniform
        rng = RngState(7)
        acc = np.zeros(2)
        n = 4000
        for _ in range(n):
            acc += ad.gumbel_softmax(Tensor([3.0, 1.0]), 100.0, False, rng).data
        np.testing.assert_allclose(acc / n, [0.5, 0.5], atol=0.02)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            ad.gumbel_softmax(Tensor([0.0, 1.0]), 0.0, True, RngState(0))

    def test_deterministic_given_rng(self):
        a = ad.gumbel_softmax(Tensor([0.3, -0.2, 0.9]), 1.0, True, RngState(5))
        b = ad.gumbel_softmax(Tensor([0.3, -0.2, 0.9]), 1.0, True, RngState(5))
        assert np.array_equal(a.data, b.data)

    def test_straight_through_backward_equals_soft(self):
        logits_data = np.array([[0.5, -1.0, 2.0], [0.1, 0.2, 0.0]])
        w = ad.constant(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        soft = Tensor(logits_data, requires_grad=True)
        ad.sum_(ad.mul(ad.gumbel_softmax(soft, 1.0, False, RngState(3)),
                       w)).backward()
        hard = Tensor(logits_data, requires_grad=True)
        ad.sum_(ad.mul(ad.gumbel_softmax(hard, 1.0, True, RngState(3)),
                       w)).backward()
        np.testing.assert_array_equal(soft.grad, hard.grad)


class TestRngState:
    def test_same_seed_same_sequence(self):
        a, b = RngState(9), RngState(9)
        for _ in range(5):
            np.testing.assert_array_equal(a.uniform(size=3), b.uniform(size=3))

    def test_state_round_trip(self):
        a = RngState(4)
        a.uniform(size=2)
        b = RngState(a.seed, a.counter)
        np.testing.assert_array_equal(a.normal(size=4), b.normal(size=4))

    def test_streams_differ_by_seed(self):
        assert not np.array_equal(RngState(1).uniform(size=4),
                                  RngState(2).uniform(size=4))


class TestOps:
    def test_nan_guard(self):
        big = Tensor([1e308])
        with pytest.raises(NumericError):
            ad.mul(big, big)  # overflows to inf

    def test_broadcast_add_backward(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        ad.sum_(ad.add(x, b)).backward()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_concat_backward_splits(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        out = ad.concat([a, b], axis=0)
        ad.sum_(ad.mul(out, ad.constant(np.arange(10.0).reshape(5, 2)))).backward()
        np.testing.assert_array_equal(a.grad, [[0, 1], [2, 3]])
        np.testing.assert_array_equal(b.grad, [[4, 5], [6, 7], [8, 9]])

    def test_slice_backward_scatters(self):
        x = Tensor(np.zeros((4, 3)), requires_grad=True)
        ad.sum_(x[1:3, 0:2]).backward()
        expected = np.zeros((4, 3))
        expected[1:3, 0:2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_sqrt_zero_subgradient(self):
        x = Tensor([0.0, 4.0], requires_grad=True)
        ad.sum_(ad.sqrt(x)).backward()
        np.testing.assert_allclose(x.grad, [0.0, 0.25])

    def test_layer_norm_moments(self):
        x = Tensor(RngState(3).normal(size=(4, 8)) * 5 + 2)
        out = ad.layer_norm(x).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)

    def test_attention_weights_rows(self):
        rng = RngState(11)
        q = Tensor(rng.normal(size=(3, 4)))
        k = Tensor(rng.normal(size=(5, 4)))
        v = ad.constant(np.full((5, 4), 0.25))
        out = ad.attention(q, k, v)
        # value rows sum to 1 and softmax weights sum to 1, so rows sum to 1
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_attention_key_mask(self):
        rng = RngState(12)
        q = Tensor(rng.normal(size=(2, 4)))
        k = Tensor(rng.normal(size=(4, 4)))
        v = ad.constant(np.arange(16.0).reshape(4, 4))
        masked = ad.attention(q, k, v, key_mask=np.array([1.0, 0.0, 1.0, 0.0]))
        kept = ad.attention(q, Tensor(k.data[[0, 2]]), Tensor(v.data[[0, 2]]))
        np.testing.assert_allclose(masked.data, kept.data, atol=1e-12)

    def test_determinism(self):
        rng = RngState(1)
        x = Tensor(rng.normal(size=(3, 3)))
        y = Tensor(RngState(1).normal(size=(3, 3)))
        a = ad.matmul(ad.relu(x), ad.sigmoid(x))
        b = ad.matmul(ad.relu(y), ad.sigmoid(y))
        assert np.array_equal(a.data, b.data)

    def test_float32_preserved(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32))
        assert ad.relu(x).dtype == np.float32
        assert ad.matmul(x, x).dtype == np.float32
