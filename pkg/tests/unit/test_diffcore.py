"""Tests for the autodiff engine."""

import numpy as np
import pytest

import diffcore as dc
from diffcore import GraphError, ShapeError, Tensor, no_grad


class TestTensorBasics:
    """Construction, dtype handling and value access."""

    def test_default_dtype_is_float64(self):
        """New tensors are float64 unless the default is switched."""
        assert Tensor([1, 2, 3]).dtype == np.float64

    def test_float32_default_applies_to_new_tensors(self):
        """Switching the default dtype affects tensors created afterwards."""
        dc.set_default_dtype("float32")
        assert Tensor([1.0]).dtype == np.float32
        assert dc.get_default_dtype() is np.float32

    def test_unknown_dtype_rejected(self):
        with pytest.raises(ValueError, match="Unsupported dtype"):
            dc.set_default_dtype("float16")

    def test_item_and_numpy(self):
        t = Tensor([[2.5]])
        assert t.item() == 2.5
        assert isinstance(t.numpy(), np.ndarray)

    def test_assign_rejects_shape_change(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(ShapeError):
            t.assign(np.zeros(4))

    def test_detach_drops_graph(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = (x * 3.0).detach()
        assert y.node is None and not y.requires_grad
        np.testing.assert_array_equal(y.values, [3.0, 6.0])


class TestBackward:
    """Gradient propagation through the recorded graph."""

    def test_reused_tensor_accumulates(self):
        """d/dx sum(x * x) = 2x when both operands are the same tensor."""
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_broadcast_gradient_sums_back(self):
        """A bias broadcast over rows receives the row count as gradient."""
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_allclose(b.grad, np.full(4, 3.0))
        assert a.grad.shape == (3, 4)

    def test_backward_needs_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError):
            (x * 2.0).backward()

    def test_constants_receive_no_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([3.0, 4.0])
        (x * c).sum().backward()
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [3.0, 4.0])

    def test_no_grad_disables_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert y.node is None and not y.requires_grad
        assert dc.is_grad_enabled()

    def test_matmul_gradients(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        (a @ b).sum().backward()
        np.testing.assert_allclose(a.grad, np.full((2, 3), 2.0))
        np.testing.assert_allclose(b.grad, np.repeat(a.values.sum(axis=0)[:, None], 2, axis=1))

    def test_division_by_tensor(self):
        x = Tensor([2.0], requires_grad=True)
        (Tensor([6.0]) / x).sum().backward()
        np.testing.assert_allclose(x.grad, [-1.5])

    def test_shared_subexpression_matches_duplicated_graph(self, rng):
        x_values, w_values = rng.normal(size=(3, 4)), rng.normal(size=4)

        def grads(shared: bool):
            x = Tensor(x_values, requires_grad=True)
            w = Tensor(w_values, requires_grad=True)
            if shared:
                u = dc.exp(x * w)
                a, b, c = u, u, u
            else:
                a, b, c = (dc.exp(x * w) for _ in range(3))
            (a * b + dc.layer_norm(c)).sum().backward()
            return x.grad, w.grad

        for got, expected in zip(grads(shared=True), grads(shared=False)):
            np.testing.assert_allclose(got, expected, rtol=1e-12)


def _random_broadcast_pair(rng):
    """Output shape of rank 1-4 with extents <= 5, and two operands broadcasting to it."""
    out = tuple(int(e) for e in rng.integers(1, 6, size=int(rng.integers(1, 5))))

    def operand():
        rank = int(rng.integers(1, len(out) + 1))
        shape = [1 if rng.random() < 0.4 else e for e in out[len(out) - rank :]]
        return rng.normal(size=shape)

    return out, operand(), operand()


def _tile_to(values, out):
    padded = values.reshape((1,) * (len(out) - values.ndim) + values.shape)
    return np.tile(padded, [o // s for o, s in zip(out, padded.shape)])


def _sum_to(grad, shape):
    grad = grad.reshape((-1,) + grad.shape[grad.ndim - len(shape) :]).sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


class TestBroadcasting:
    """Broadcast add/mul agree with explicitly tiled operands, forward and backward."""

    @pytest.mark.parametrize("op", ["add", "mul"])
    def test_matches_explicit_tiling(self, rng, op):
        combine = (lambda a, b: a + b) if op == "add" else (lambda a, b: a * b)
        for _ in range(200):
            out, a_values, b_values = _random_broadcast_pair(rng)
            weights = rng.normal(size=out)

            a, b = Tensor(a_values, requires_grad=True), Tensor(b_values, requires_grad=True)
            result = combine(a, b)
            (result * weights).sum().backward()

            a_tiled = Tensor(_tile_to(a_values, out), requires_grad=True)
            b_tiled = Tensor(_tile_to(b_values, out), requires_grad=True)
            tiled = combine(a_tiled, b_tiled)
            (tiled * weights).sum().backward()

            assert result.shape == out
            np.testing.assert_allclose(result.values, tiled.values, rtol=1e-12)
            np.testing.assert_allclose(a.grad, _sum_to(a_tiled.grad, a_values.shape), rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(b.grad, _sum_to(b_tiled.grad, b_values.shape), rtol=1e-10, atol=1e-12)


class TestShapeErrors:
    """Non-conforming operands raise ShapeError naming the op."""

    def test_add_mismatch(self):
        with pytest.raises(ShapeError, match="add"):
            dc.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_matmul_needs_matrices(self):
        with pytest.raises(ShapeError, match="matmul"):
            dc.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))

    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))

    def test_reshape_mismatch(self):
        with pytest.raises(ShapeError, match="reshape"):
            dc.reshape(Tensor(np.zeros(6)), (4, 2))

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError, match="concat"):
            dc.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)

    def test_embedding_out_of_range(self):
        with pytest.raises(ShapeError):
            dc.embedding(Tensor(np.zeros((3, 2))), [0, 3])


class TestOps:
    """Forward values of the non-trivial ops."""

    def test_softmax_rows_sum_to_one(self, rng):
        y = dc.softmax(Tensor(rng.normal(size=(4, 5)) * 10))
        np.testing.assert_allclose(y.values.sum(axis=-1), np.ones(4))

    def test_layer_norm_standardizes_last_axis(self, rng):
        y = dc.layer_norm(Tensor(rng.normal(3.0, 2.0, size=(3, 64))), eps=0.0)
        np.testing.assert_allclose(y.values.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.values.std(axis=-1), 1.0, atol=1e-12)

    def test_gelu_known_values(self):
        y = dc.gelu(Tensor([0.0, 1.0, -1.0]))
        np.testing.assert_allclose(y.values, [0.0, 0.8413447460685429, -0.15865525393145707])

    def test_relu(self):
        np.testing.assert_array_equal(dc.relu(Tensor([-1.0, 0.0, 2.0])).values, [0.0, 0.0, 2.0])

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.ones(10))
        assert dc.dropout(x, 0.5, training=False) is x

    def test_dropout_scales_kept_units(self):
        mask = np.array([True, False, True, False])
        y = dc.dropout(Tensor(np.ones(4)), 0.5, mask=mask)
        np.testing.assert_allclose(y.values, [2.0, 0.0, 2.0, 0.0])

    def test_dropout_is_reproducible_from_seed(self):
        x = Tensor(np.ones(100))
        first = dc.dropout(x, 0.3, rng=np.random.default_rng(5)).values
        second = dc.dropout(x, 0.3, rng=np.random.default_rng(5)).values
        np.testing.assert_array_equal(first, second)

    @pytest.mark.parametrize("p", [-0.1, 1.0])
    def test_dropout_probability_range(self, p):
        with pytest.raises(ValueError):
            dc.dropout(Tensor(np.ones(3)), p, rng=np.random.default_rng(0))

    def test_transpose_default_swaps_last_two(self):
        assert dc.transpose(Tensor(np.zeros((2, 3, 4)))).shape == (2, 4, 3)

    def test_conv3d_matches_direct_sum(self, rng):
        """Padded, strided conv3d equals an explicit loop over output positions."""
        x = rng.normal(size=(1, 2, 3, 5, 4))
        w = rng.normal(size=(3, 2, 2, 3, 3))
        b = rng.normal(size=3)
        out = dc.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=(1, 2, 1), padding=(0, 1, 1)).values

        padded = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros(out.shape)
        for o in range(3):
            for t in range(out.shape[2]):
                for i in range(out.shape[3]):
                    for j in range(out.shape[4]):
                        window = padded[0, :, t : t + 2, 2 * i : 2 * i + 3, j : j + 3]
                        expected[0, o, t, i, j] = (window * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)

    def test_conv3d_channel_mismatch(self):
        with pytest.raises(ShapeError, match="conv3d"):
            dc.conv3d(Tensor(np.zeros((1, 2, 3, 3, 3))), Tensor(np.zeros((1, 3, 1, 1, 1))))

    def test_exp_log_inverse(self):
        x = Tensor([0.5, 1.0, 2.0])
        np.testing.assert_allclose(dc.log(dc.exp(x)).values, x.values)

    def test_mean_over_axes(self):
        m = dc.mean(Tensor(np.arange(24.0).reshape(2, 3, 4)), axis=(0, 2))
        np.testing.assert_allclose(m.values, np.arange(24.0).reshape(2, 3, 4).mean(axis=(0, 2)))
