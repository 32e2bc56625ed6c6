import math

import numpy as np
import pytest

from msdg import heads, nn
from msdg import tensor as T
from msdg.heads import PrototypeBank
from msdg.tensor import Tensor


def bank_with(protos):
    protos = np.asarray(protos, dtype=float)
    b = PrototypeBank(protos.shape[1], protos.shape[2])
    b.protos.data[...] = protos / np.linalg.norm(protos, axis=-1, keepdims=True)
    b.initialized[...] = True
    return b


class TestDistances:
    def test_cosine_cases(self):
        b = bank_with([[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]] * 2)
        d = heads.prototype_distances(Tensor([2.0, 0.0]), Tensor([0.0, 3.0]), b).data
        np.testing.assert_allclose(d[0], [-1.0, 0.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(d[1], [0.0, -1.0, 0.0], atol=1e-15)

    def test_uninitialized_slot_is_excluded(self):
        b = bank_with([[[1.0, 0.0], [0.0, 1.0]]] * 2)
        b.initialized[:, 1] = False
        with pytest.warns(UserWarning):
            d = heads.prototype_distances(Tensor([0.0, 1.0]), Tensor([0.0, 1.0]), b).data
        cls, _ = heads.prototype_predict(Tensor(d))
        assert cls == 0

    def test_width_mismatch(self):
        with pytest.raises(T.ShapeError):
            heads.prototype_distances(Tensor([1.0, 0.0, 0.0]), Tensor([1.0, 0.0, 0.0]), bank_with([[[1.0, 0.0]]] * 2))


class TestPredict:
    def test_closed_form(self):
        cls, p = heads.prototype_predict(Tensor([[-1.0, 0.0], [0.0, 0.0]]))
        assert cls == 0
        np.testing.assert_allclose(p.data, [0.7311, 0.2689], atol=1e-4)
        e = math.e
        np.testing.assert_allclose(p.data, [e / (e + 1), 1 / (e + 1)], rtol=1e-14)

    def test_ties(self):
        cls, p = heads.prototype_predict(Tensor(np.full((2, 4), 0.3)))
        assert cls == 0
        np.testing.assert_allclose(p.data, 0.25, rtol=1e-14)

    def test_normalized(self, rng):
        _, p = heads.prototype_predict(Tensor(rng.uniform(-1, 1, size=(50, 2, 6))))
        np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-9)


class TestUpdate:
    def test_first_batch_is_normalized_mean(self, rng):
        b = PrototypeBank(3, 4)
        f = rng.normal(size=(5, 4))
        heads.prototype_update(b, f, f, np.zeros(5, dtype=int))
        mean = f.mean(0)
        np.testing.assert_allclose(b.protos.data[0, 0], mean / np.linalg.norm(mean), rtol=1e-12)
        assert b.initialized[:, 0].all() and not b.initialized[:, 1:].any()

    def test_fixed_point(self, rng):
        b = PrototypeBank(2, 3)
        heads.prototype_update(b, np.array([[1.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]), [0])
        f = rng.normal(size=(4, 3))
        for _ in range(300):
            heads.prototype_update(b, f, f, np.zeros(4, dtype=int))
        target = f.mean(0) / np.linalg.norm(f.mean(0))
        np.testing.assert_allclose(b.protos.data[0, 0], target, atol=1e-10)

    def test_absent_classes_untouched(self, rng):
        b = bank_with(rng.normal(size=(2, 3, 4)))
        before = b.protos.data.copy()
        heads.prototype_update(b, rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), [1, 1])
        np.testing.assert_array_equal(b.protos.data[:, [0, 2]], before[:, [0, 2]])
        assert not np.array_equal(b.protos.data[:, 1], before[:, 1])

    def test_unit_norm(self, rng):
        b = PrototypeBank(3, 5)
        for _ in range(5):
            heads.prototype_update(b, rng.normal(size=(9, 5)), rng.normal(size=(9, 5)), rng.integers(0, 3, 9))
        n = np.linalg.norm(b.protos.data, axis=-1)[b.initialized]
        np.testing.assert_allclose(n, 1.0, rtol=1e-12)


class TestPCE:
    def test_perfect(self):
        y = np.eye(3)
        assert float(heads.loss_pce(Tensor(y), y).data) == 0.0

    def test_uniform(self):
        y = np.eye(7)[[2]]
        assert float(heads.loss_pce(Tensor(np.full((1, 7), 1 / 7)), y).data) == pytest.approx(math.log(7), rel=1e-14)

    def test_monotone_in_true_mass(self):
        y = np.array([[0.0, 1.0, 0.0]])
        uniform, onehot = np.full(3, 1 / 3), y[0]
        losses = [float(heads.loss_pce(Tensor([(1 - t) * uniform + t * onehot]), y).data) for t in (0.1, 0.6)]
        assert losses[1] < losses[0]

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            heads.loss_pce(Tensor([[0.5, 0.6]]), np.array([[1.0, 0.0]]))


def kmm_params(rng, d, C):
    return heads.init_kmm(rng, d, C)


class TestKMM:
    def test_kernel_peak(self, rng):
        p = kmm_params(rng, 4, 3)
        nn.zero_params_like(p.mean)
        p.mean.bias.data[...] = 0.8
        out = heads.kmm_forward(Tensor(np.full(4, 0.8)), p)
        np.testing.assert_allclose(out.zeta.data, 1.0, rtol=0, atol=0)
        np.testing.assert_array_equal(out.phi.data, out.pi.data)

    def test_one_over_e(self, rng):
        p = kmm_params(rng, 2, 1)
        for lin in (p.mean, p.sigma):
            nn.zero_params_like(lin)
        p.sigma.bias.data[...] = 0.5  # sigma = 1.5
        f = np.array([1.5, 1.5])      # |f - 0|^2 = 4.5 = 2 * 1.5^2
        out = heads.kmm_forward(Tensor(f), p)
        assert float(out.sigma.data[0, 0]) == 1.5
        assert float(out.zeta.data[0, 0]) == pytest.approx(math.exp(-1.0), rel=1e-14)

    def test_phi_in_open_unit_interval(self, rng):
        p = kmm_params(rng, 6, 4)
        out = heads.kmm_forward(Tensor(0.2 * rng.normal(size=(20, 6))), p)
        assert np.all(out.phi.data > 0) and np.all(out.phi.data < 1)
        # far from every centre the kernel underflows to exactly 0 but never leaves [0, 1)
        far = heads.kmm_forward(Tensor(30 * rng.normal(size=(20, 6))), p)
        assert np.all(far.phi.data >= 0) and np.all(far.phi.data < 1)

    def test_loss_vanishes_at_ideal_outputs(self):
        one = Tensor(np.array([[1.0 - 1e-12, 1e-12]]))
        out = heads.KMMOutputs(pi=one, mu=None, sigma=Tensor(np.ones((1, 2))), zeta=None, phi=None,
                               sqdist=Tensor(np.array([[0.0, 5.0]])))
        # the floor on pi keeps the log finite; the residual is of order 1e-6
        assert float(heads.kmm_loss(out, np.array([[1.0, 0.0]])).data) < 1e-5

    def test_positive_term_closed_form(self):
        out = heads.KMMOutputs(pi=Tensor([[0.5]]), mu=None, sigma=Tensor([[1.0]]), zeta=None, phi=None,
                               sqdist=Tensor([[0.0]]))
        value = float(heads.kmm_loss(out, np.array([[1.0]]), gamma_plus=2.0).data)
        assert value == pytest.approx(-0.25 * math.log(0.5), rel=1e-14)
        assert value == pytest.approx(0.1733, abs=1e-4)

    def test_gradient_reaches_all_heads(self, rng):
        p = kmm_params(rng, 4, 3)
        y = np.eye(3)[[0, 2]]
        f = rng.normal(size=(2, 4))
        params = [t for _, t in nn.named_tensors(p)]
        assert T.finite_diff_check(lambda: heads.kmm_loss(heads.kmm_forward(Tensor(f), p), y), params) < 1e-4
