import numpy as np
import pytest

from msdg import tensor as T
from msdg.tensor import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(T.elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])

    def test_mul_by_ones_is_identity(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(T.mul(x, T.ones_like(x)).data, x.data)

    def test_log_exp_inverse(self):
        assert abs(T.log(T.exp(Tensor([0.5]))).data[0] - 0.5) < 1e-12

    def test_broadcast_gradient_reduces_to_operand_shape(self):
        a, b = leaf(np.ones((2, 3))), leaf(np.ones(3))
        g = T.backward(T.sum(a * b))
        assert g[b].shape == (3,)
        np.testing.assert_array_equal(g[b], [2, 2, 2])

    @pytest.mark.parametrize("fn", [T.log, T.sqrt])
    def test_domain_errors(self, fn):
        with pytest.raises(T.DomainError):
            fn(Tensor([1.0, 0.0]))

    def test_division_by_zero(self):
        with pytest.raises(T.DomainError):
            T.div(Tensor([1.0]), Tensor([0.0]))

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.elementwise("tanh", Tensor([1.0]))


class TestMatmul:
    def test_identity(self):
        A = Tensor([[1, 2], [3, 4]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), A).data, A.data)

    def test_selector_row(self):
        np.testing.assert_array_equal(T.matmul(Tensor([[1, 0]]), Tensor([[2], [5]])).data, [[2]])

    def test_grad_of_sum_is_ones_times_bt(self, rng):
        A, B = leaf(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
        g = T.backward(T.sum(T.matmul(A, B)))
        np.testing.assert_allclose(g[A], np.ones((3, 2)) @ B.data.T, rtol=1e-12)
        assert T.finite_diff_check(lambda: T.sum(T.matmul(A, B)), [A]) < 1e-6

    def test_inner_extent_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestReduce:
    def test_mean_midpoint(self):
        np.testing.assert_array_equal(T.reduce("mean", Tensor([[1, 3]]), (1,)).data, [2])

    def test_std_of_constant(self):
        x = leaf(np.full((3, 3), 2.5))
        s = T.std(x)
        assert s.data == 0.0
        np.testing.assert_array_equal(T.backward(s)[x], 0.0)

    def test_std_is_population(self):
        assert T.std(Tensor([1.0, 3.0])).data == pytest.approx(1.0)

    def test_sum_grad_is_ones(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        g = T.backward(T.sum(T.sum(x, (0, 2))))
        np.testing.assert_array_equal(g[x], np.ones((2, 3, 4)))

    def test_keepdims(self):
        assert T.mean(Tensor(np.ones((2, 3, 4))), (1,), keepdims=True).shape == (2, 1, 4)

    def test_bad_axis(self):
        with pytest.raises(T.ShapeError):
            T.sum(Tensor(np.ones((2, 2))), 5)


class TestBackward:
    def test_linear(self, rng):
        x = leaf(rng.normal(size=5))
        np.testing.assert_array_equal(T.backward(T.sum(x))[x], np.ones(5))

    def test_power_rule(self):
        x = leaf([3.0])
        np.testing.assert_array_equal(T.backward(T.sum(T.square(x)))[x], [6.0])

    def test_shared_subexpression_accumulates(self):
        x = leaf([2.0])
        y = x * x
        np.testing.assert_allclose(T.backward(T.sum(y + y))[x], [8.0])

    def test_non_scalar_loss(self):
        with pytest.raises(T.GraphError):
            T.backward(leaf([1.0, 2.0]) * 2)

    def test_detached_loss(self):
        with pytest.raises(T.GraphError):
            T.backward(T.sum(Tensor([1.0, 2.0])))

    def test_composite_graph_matches_finite_differences(self, rng):
        x, w = leaf(rng.uniform(0.5, 1.5, size=(3, 4))), leaf(rng.normal(size=(4, 2)))

        def f():
            h = T.exp(T.matmul(T.log(x), w) * 0.3)
            return T.mean(T.sqrt(h + 1.0)) + T.std(h)

        assert T.finite_diff_check(f, [x, w]) < 1e-6

    def test_clip_minimum_and_gather(self):
        x = leaf([-0.5, 0.3, 1.5])
        g = T.backward(T.sum(T.clip(x, 0.0, 1.0)))
        np.testing.assert_array_equal(g[x], [0, 1, 0])
        a, b = leaf([1.0, 5.0]), leaf([2.0, 3.0])
        g = T.backward(T.sum(T.minimum(a, b)))
        np.testing.assert_array_equal(g[a], [1, 0])
        np.testing.assert_array_equal(g[b], [0, 1])
        z = leaf([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(T.backward(T.sum(T.take(z, [0, 0, 2])))[z], [2, 0, 1])


class TestFiniteDiff:
    def test_linear_is_exact(self, rng):
        x = leaf(rng.normal(size=6))
        assert T.finite_diff_check(lambda: T.sum(x * 3.0), [x]) < 1e-9

    def test_quadratic_is_exact(self, rng):
        x = leaf(rng.normal(size=6))
        assert T.finite_diff_check(lambda: T.sum(T.square(x) * 2.0 + x), [x]) < 1e-9

    def test_detects_a_wrong_gradient(self):
        x = leaf([1.0, 2.0])

        def broken():
            out = T.sum(T.square(x))
            out._backward = lambda g, n: (g * 0.0,)  # pretend the sum has no gradient
            return out

        assert T.finite_diff_check(broken, [x]) > 0.5


class TestSerialization:
    def test_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(2, 3, 4))
        T.save_tensor(tmp_path / "x.msdg", x)
        np.testing.assert_array_equal(T.load_tensor(tmp_path / "x.msdg").data, x)

    def test_layout(self):
        buf = T.tensor_to_bytes(np.array([[1.0, 2.0]]))
        assert buf[:5] == b"MSDG1"
        assert buf[5] == 2
        assert buf[6:14] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert np.frombuffer(buf[14:], "<f8").tolist() == [1.0, 2.0]

    def test_scalar(self):
        t, end = T.tensor_from_bytes(T.tensor_to_bytes(3.5))
        assert t.shape == () and float(t.data) == 3.5 and end == 14

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            T.tensor_from_bytes(b"XXXXX" + bytes(20))

    def test_truncated(self):
        buf = T.tensor_to_bytes(np.ones(4))
        with pytest.raises(ValueError, match="truncated"):
            T.tensor_from_bytes(buf[:-1])

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "x").write_bytes(T.tensor_to_bytes(np.ones(2)) + b"\0")
        with pytest.raises(ValueError, match="trailing"):
            T.load_tensor(tmp_path / "x")

    def test_checksum_tracks_values(self, rng):
        a = Tensor(rng.normal(size=3))
        before = T.parameters_checksum([a])
        assert T.parameters_checksum([a]) == before
        a.data[0] += 1e-12
        assert T.parameters_checksum([a]) != before
