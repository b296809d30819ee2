import numpy as np
import pytest

from certseg import autodiff as ad
from certseg.losses import (
    loss_consistency,
    loss_prototype,
    loss_supervised,
    loss_uniformity,
    total_loss,
)
from certseg.model import PrototypeBank

TOL = 1e-6


class TestConsistency:
    def test_uniform_times_uniform_is_ln_k(self):
        # both branches uniform over 2 classes -> cross-entropy ln 2
        p = ad.Tensor(np.full((1, 2, 2, 2), 0.5))
        out = loss_consistency(p, p, np.ones((1, 2, 2)))
        assert out.data == pytest.approx(np.log(2.0), abs=TOL)

    def test_empty_mask_gives_zero(self):
        p = ad.Tensor(np.full((1, 2, 2, 2), 0.5))
        out = loss_consistency(p, p, np.zeros((1, 2, 2)))
        assert out.data == 0.0

    def test_identical_onehot_gives_zero(self):
        p = np.zeros((1, 2, 1, 1))
        p[0, 0] = 1.0
        out = loss_consistency(ad.Tensor(p), ad.Tensor(p), np.ones((1, 1, 1)))
        assert out.data == pytest.approx(0.0, abs=1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(size=(1, 3, 2, 2))
        mask = np.array([[[1.0, 0.0], [1.0, 1.0]]])
        other = ad.softmax_t(ad.Tensor(rng.normal(size=(1, 3, 2, 2))), 1.0, axis=1)

        def f(t):
            return loss_consistency(ad.softmax_t(t, 1.0, axis=1), other, mask)

        assert ad.gradient_check(f, raw) < 1e-5

    def test_out_of_range_probs_rejected(self):
        bad = ad.Tensor(np.full((1, 2, 1, 1), 1.5))
        with pytest.raises(ValueError):
            loss_consistency(bad, bad, np.ones((1, 1, 1)))


class TestUniformity:
    def test_identical_features(self):
        # two identical rows: e^0 summed over 2 ordered pairs / 2 = 1
        z = np.zeros((2, 3, 1, 1))
        z[:, 0] = 1.0
        out = loss_uniformity(ad.Tensor(z), pool=1)
        assert out.data == pytest.approx(1.0, abs=TOL)

    def test_antipodal_features(self):
        z = np.zeros((2, 3, 1, 1))
        z[0, 0], z[1, 0] = 1.0, -1.0  # squared distance 4, t=2 -> e^-8
        out = loss_uniformity(ad.Tensor(z), pool=1)
        assert out.data == pytest.approx(np.exp(-8.0), abs=TOL)

    def test_single_row_is_zero(self):
        out = loss_uniformity(ad.Tensor(np.ones((1, 3, 1, 1))), pool=1)
        assert out.data == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(2, 3, 4, 4))
        assert ad.gradient_check(lambda t: loss_uniformity(t, pool=4), z) < 1e-5


class TestPrototype:
    def _bank(self, vectors):
        return PrototypeBank(vectors=ad.Tensor(vectors), history={i: vectors[:, i] for i in range(vectors.shape[1])})

    def test_orthonormal(self):
        out = loss_prototype(self._bank(np.eye(3)))
        assert out.data == pytest.approx(0.0, abs=TOL)

    def test_identical_pair_minus_one_hits_one(self):
        v = np.ones((2, 2)) / np.sqrt(2.0)
        out = loss_prototype(self._bank(v))
        assert out.data == pytest.approx(1.0, abs=TOL)

    def test_three_at_120_degrees(self):
        angles = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        v = np.stack([np.cos(angles), np.sin(angles)])
        out = loss_prototype(self._bank(v))
        assert out.data == pytest.approx(-0.5, abs=TOL)

    def test_single_prototype_rejected(self):
        with pytest.raises(ValueError):
            loss_prototype(self._bank(np.ones((3, 1))))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=(4, 3))

        def f(t):
            return loss_prototype(PrototypeBank(vectors=ad.l2_normalize(t, axis=0)))

        assert ad.gradient_check(f, v) < 1e-5


class TestSupervised:
    def test_uniform_probs_is_ln_k(self):
        probs = ad.Tensor(np.full((1, 4, 2, 2), 0.25))
        labels = np.zeros((1, 2, 2), dtype=int)
        loss, warn = loss_supervised(probs, labels)
        assert loss.data == pytest.approx(np.log(4.0), abs=TOL)
        assert not warn

    def test_all_void_returns_zero_with_warning(self):
        probs = ad.Tensor(np.full((1, 4, 2, 2), 0.25))
        labels = np.full((1, 2, 2), -1)
        loss, warn = loss_supervised(probs, labels)
        assert loss.data == 0.0 and warn

    def test_void_pixels_excluded(self):
        probs = np.full((1, 2, 1, 2), 0.5)
        probs[0, :, 0, 1] = [1.0, 0.0]  # wrong-confident pixel, but void
        labels = np.array([[[0, -1]]])
        loss, _ = loss_supervised(ad.Tensor(probs), labels)
        assert loss.data == pytest.approx(np.log(2.0), abs=TOL)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(size=(1, 3, 2, 2))
        labels = rng.integers(0, 3, size=(1, 2, 2))
        labels[0, 0, 0] = -1

        def f(t):
            return loss_supervised(ad.softmax_t(t, 1.0, axis=1), labels)[0]

        assert ad.gradient_check(f, raw) < 1e-5


class TestTotal:
    def test_weighted_sum(self):
        total, report = total_loss(1.0, 2.0, 3.0, 4.0, weights=(1.0, 0.5, 0.0, 2.0))
        assert total.data == pytest.approx(1 + 1 + 0 + 8)
        assert report.l_u == 2.0 and report.weights == (1.0, 0.5, 0.0, 2.0)

    def test_nonfinite_component_rejected(self):
        with pytest.raises(ValueError, match="l_p"):
            total_loss(0.0, 0.0, float("nan"), 0.0)

    def test_report_carries_mask_stats(self):
        _, report = total_loss(0.0, 0.0, 0.0, 0.0, n_certain=17, void_warning=True)
        assert report.n_certain == 17 and report.void_warning
