import numpy as np
import pytest

from certseg import autodiff as ad

RTOL = 1e-5


def check(f, x, h=1e-5):
    err = ad.gradient_check(f, x, h=h)
    assert err < RTOL, f"finite-difference mismatch {err:.3e}"


def rng_for(i):
    return np.random.default_rng([7, i])


class TestElementwise:
    def test_add_mul_sub(self):
        for i in range(20):
            rng = rng_for(i)
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(3, 4))
            check(lambda t: ad.tsum(ad.add(t, ad.Tensor(b))), a)
            check(lambda t: ad.tsum(ad.mul(t, ad.Tensor(b))), a)
            check(lambda t: ad.tsum(ad.sub(ad.Tensor(b), t)), a)

    def test_exp_log_scale_negate(self):
        for i in range(20):
            rng = rng_for(i)
            a = rng.uniform(0.5, 2.0, size=(5,))
            check(lambda t: ad.tsum(ad.exp(ad.scale(t, -0.7))), a)
            check(lambda t: ad.tsum(ad.log(t)), a)
            check(lambda t: ad.tsum(ad.negate(t)), a)

    def test_log_floor_blocks_gradient(self):
        t = ad.Tensor(np.array([1e-20, 1.0]), requires_grad=True)
        out = ad.tsum(ad.log(t, floor=1e-12))
        ad.backward(out)
        assert t.grad[0] == 0.0  # clamped entry gets no gradient
        assert t.grad[1] == pytest.approx(1.0)

    def test_relu(self):
        for i in range(20):
            rng = rng_for(i)
            a = rng.normal(size=(4, 4)) + 0.05  # keep away from the kink
            a[np.abs(a) < 1e-3] += 0.01
            check(lambda t: ad.tsum(ad.relu(t)), a)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeMismatchError):
            ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))


class TestLinalg:
    def test_matmul(self):
        for i in range(20):
            rng = rng_for(i)
            a = rng.normal(size=(3, 5))
            b = rng.normal(size=(5, 2))
            check(lambda t: ad.tsum(ad.matmul(t, ad.Tensor(b))), a)
            check(lambda t: ad.tsum(ad.matmul(ad.Tensor(a), t)), b)

    def test_pairwise_sqdist(self):
        for i in range(20):
            rng = rng_for(i)
            a = rng.normal(size=(4, 3))
            check(lambda t: ad.tsum(ad.pairwise_sqdist(t)), a)

    def test_pairwise_sqdist_values(self):
        a = np.array([[0.0, 0.0], [3.0, 4.0]])
        d = ad.pairwise_sqdist(ad.Tensor(a)).data
        assert d[0, 1] == pytest.approx(25.0)
        assert d[0, 0] == pytest.approx(0.0)

    def test_l2_normalize(self):
        for i in range(20):
            rng = rng_for(i)
            a = rng.normal(size=(2, 5)) * 2
            check(lambda t: ad.tsum(ad.mul(ad.l2_normalize(t, axis=1), ad.l2_normalize(t, axis=1))), a)

    def test_l2_normalize_zero_vector_passthrough(self):
        t = ad.Tensor(np.zeros((1, 4)))
        out = ad.l2_normalize(t, axis=1)
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


class TestSoftmax:
    def test_gradient(self):
        for i in range(20):
            rng = rng_for(i)
            a = rng.normal(size=(2, 3, 2))
            w = rng.normal(size=(2, 3, 2))
            check(lambda t: ad.tsum(ad.mul(ad.softmax_t(t, 0.7, axis=1), ad.Tensor(w))), a)

    def test_rows_sum_to_one(self):
        a = rng_for(0).normal(size=(2, 5, 3))
        p = ad.softmax_t(ad.Tensor(a), 0.07, axis=1).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_temperature_rejected(self):
        with pytest.raises(ValueError):
            ad.softmax_t(ad.Tensor(np.zeros((1, 2))), 0.0, axis=1)
        with pytest.raises(ValueError):
            ad.softmax_t(ad.Tensor(np.zeros((1, 2))), -1.0, axis=1)


class TestConvPoolResize:
    def test_conv2d(self):
        for i in range(10):
            rng = rng_for(i)
            x = rng.normal(size=(1, 2, 6, 6))
            w = rng.normal(size=(3, 2, 3, 3))
            b = rng.normal(size=(3,))
            check(lambda t: ad.tsum(ad.conv2d(t, ad.Tensor(w), ad.Tensor(b), stride=2, padding=1)), x)
            check(lambda t: ad.tsum(ad.conv2d(ad.Tensor(x), t, ad.Tensor(b), stride=1, padding=1)), w)
            check(lambda t: ad.tsum(ad.conv2d(ad.Tensor(x), ad.Tensor(w), t)), b)

    def test_conv2d_identity_kernel(self):
        x = rng_for(1).normal(size=(1, 1, 4, 4))
        w = np.zeros((1, 1, 1, 1))
        w[0, 0, 0, 0] = 1.0
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w)).data
        np.testing.assert_allclose(out, x)

    def test_avg_pool(self):
        for i in range(10):
            rng = rng_for(i)
            x = rng.normal(size=(2, 3, 4, 4))
            check(lambda t: ad.tsum(ad.avg_pool(t, 2)), x)
        x = np.ones((1, 1, 4, 4))
        np.testing.assert_allclose(ad.avg_pool(ad.Tensor(x), 4).data, 1.0)

    def test_bilinear_resize(self):
        for i in range(10):
            rng = rng_for(i)
            x = rng.normal(size=(1, 2, 4, 5))
            w = rng.normal(size=(1, 2, 9, 7))
            check(lambda t: ad.tsum(ad.mul(ad.bilinear_resize(t, (9, 7)), ad.Tensor(w))), x)

    def test_bilinear_resize_corners(self):
        x = rng_for(2).normal(size=(1, 1, 3, 3))
        up = ad.bilinear_resize(ad.Tensor(x), (7, 7)).data
        assert up[0, 0, 0, 0] == pytest.approx(x[0, 0, 0, 0])
        assert up[0, 0, -1, -1] == pytest.approx(x[0, 0, -1, -1])

    def test_crop2d(self):
        for i in range(10):
            rng = rng_for(i)
            x = rng.normal(size=(1, 2, 6, 6))
            check(lambda t: ad.tsum(ad.crop2d(t, 1, 2, 3, 3)), x)
        with pytest.raises(ValueError):
            ad.crop2d(ad.Tensor(np.zeros((1, 1, 4, 4))), 2, 2, 3, 3)


class TestReductionsAndStructure:
    def test_reductions(self):
        for i in range(20):
            rng = rng_for(i)
            x = rng.normal(size=(3, 4))
            check(lambda t: ad.tmean(t), x)
            check(lambda t: ad.tsum(ad.tsum_axis(t, axis=1)), x)

    def test_tmax_first_argmax(self):
        x = np.array([[1.0, 3.0, 3.0]])
        t = ad.Tensor(x, requires_grad=True)
        ad.backward(ad.tsum(ad.tmax(t, axis=1)))
        np.testing.assert_array_equal(t.grad, [[0.0, 1.0, 0.0]])

    def test_masked_mean(self):
        for i in range(20):
            rng = rng_for(i)
            x = rng.normal(size=(2, 3))
            m = (rng.random((2, 3)) > 0.4).astype(float)
            if m.sum() == 0:
                m[0, 0] = 1.0
            check(lambda t: ad.masked_mean(t, m), x)

    def test_masked_mean_empty_mask(self):
        out = ad.masked_mean(ad.Tensor(np.ones((2, 2))), np.zeros((2, 2)))
        assert out.data == 0.0

    def test_reshape_transpose_concat(self):
        for i in range(10):
            rng = rng_for(i)
            x = rng.normal(size=(2, 3, 4))
            w = rng.normal(size=(4, 6))
            check(lambda t: ad.tsum(ad.mul(ad.reshape(ad.transpose(t, (2, 0, 1)), (4, 6)), ad.Tensor(w))), x)
            y = rng.normal(size=(2, 2))
            check(lambda t: ad.tsum(ad.concat([t, ad.Tensor(y)], axis=0)), rng.normal(size=(3, 2)))

    def test_dropout_deterministic(self):
        x = ad.Tensor(np.ones((2, 8, 4, 4)))
        a = ad.dropout(x, 0.5, seed=3, counter=1).data
        b = ad.dropout(x, 0.5, seed=3, counter=1).data
        c = ad.dropout(x, 0.5, seed=3, counter=2).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_dropout_scaling(self):
        x = ad.Tensor(np.ones((1, 4, 16, 16)))
        out = ad.dropout(x, 0.25, seed=0, counter=0).data
        assert set(np.round(np.unique(out), 9)) <= {0.0, np.round(1 / 0.75, 9)}


class TestEngine:
    def test_fanout_accumulation(self):
        t = ad.Tensor(np.array([2.0]), requires_grad=True)
        out = ad.add(ad.mul(t, t), t)  # x^2 + x, d/dx = 2x + 1
        ad.backward(ad.tsum(out))
        assert t.grad[0] == pytest.approx(5.0)

    def test_leaf_grads_accumulate_across_calls(self):
        t = ad.Tensor(np.array([1.0]), requires_grad=True)
        ad.backward(ad.tsum(ad.scale(t, 3.0)))
        ad.backward(ad.tsum(ad.scale(t, 3.0)))
        assert t.grad[0] == pytest.approx(6.0)
        t.zero_grad()
        assert t.grad is None

    def test_detach_blocks_gradient(self):
        t = ad.Tensor(np.array([2.0]), requires_grad=True)
        out = ad.tsum(ad.mul(t.detach(), t))
        ad.backward(out)
        assert t.grad[0] == pytest.approx(2.0)  # only the live factor contributes

    def test_gradient_check_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ad.gradient_check(lambda t: ad.tsum(ad.log(t)), np.array([-1.0]))
