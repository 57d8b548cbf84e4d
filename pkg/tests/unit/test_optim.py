"""Tests for the AdamW update and gradient clipping."""

import numpy as np
import pytest

from diffcore import Tensor
from optim import EPS, AdamW, MomentState, NonFiniteGradientError, clip_grad_norm, optimizer_step


def _param(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestOptimizerStep:
    def test_first_step_moves_by_lr_times_sign(self):
        """After bias correction the first Adam step is lr * g / (|g| + eps)."""
        w = _param([1.0, -2.0, 0.5])
        grad = np.array([0.3, -4.0, 1e-3])
        optimizer_step({"w": w}, {"w": grad}, lr=0.1, weight_decay=0.0, state=MomentState())
        expected = np.array([1.0, -2.0, 0.5]) - 0.1 * grad / (np.abs(grad) + EPS)
        np.testing.assert_allclose(w.values, expected, rtol=1e-12)

    def test_decay_is_decoupled_from_gradient(self):
        """A parameter without gradient only shrinks by (1 - lr * wd)."""
        w = _param([2.0, -4.0])
        optimizer_step({"w": w}, {"w": None}, lr=0.01, weight_decay=0.5, state=MomentState())
        np.testing.assert_allclose(w.values, [2.0 * 0.995, -4.0 * 0.995])

    def test_parameters_missing_from_grads_are_decayed(self):
        w = _param([1.0])
        optimizer_step({"w": w}, {}, lr=0.1, weight_decay=0.1, state=MomentState())
        np.testing.assert_allclose(w.values, [0.99])

    def test_moments_accumulate(self):
        w = _param([0.0])
        state = MomentState()
        for _ in range(3):
            optimizer_step({"w": w}, {"w": np.array([1.0])}, lr=0.1, weight_decay=0.0, state=state)
        assert state.step == 3
        np.testing.assert_allclose(state.m["w"], [1 - 0.9**3])
        np.testing.assert_allclose(state.v["w"], [1 - 0.999**3])

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_gradient_rejected_before_update(self, bad):
        w = _param([1.0, 1.0])
        state = MomentState()
        with pytest.raises(NonFiniteGradientError) as excinfo:
            optimizer_step({"w": w}, {"w": np.array([0.0, bad])}, lr=0.1, weight_decay=0.1, state=state)
        assert excinfo.value.path == "w"
        assert state.step == 0
        np.testing.assert_array_equal(w.values, [1.0, 1.0])


class TestClipGradNorm:
    def test_rescales_above_threshold(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0]), "c": None}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(grads["a"], [0.6])
        np.testing.assert_allclose(grads["b"], [0.8])

    def test_leaves_small_gradients(self):
        grads = {"a": np.array([0.1, 0.2])}
        clip_grad_norm(grads, 10.0)
        np.testing.assert_array_equal(grads["a"], [0.1, 0.2])


class TestAdamW:
    def test_step_uses_tensor_gradients(self):
        w = _param([1.0, 2.0])
        opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
        (w * w).sum().backward()
        norm = opt.step()
        assert norm == pytest.approx(np.sqrt(4.0 + 16.0))
        np.testing.assert_allclose(w.values, [0.9, 1.9], rtol=1e-6)

    def test_lr_override(self):
        w = _param([1.0])
        opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
        w.grad = np.array([1.0])
        opt.step(lr=0.5)
        np.testing.assert_allclose(w.values, [0.5], rtol=1e-6)

    def test_zero_grad(self):
        w = _param([1.0])
        opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
        w.grad = np.array([1.0])
        opt.zero_grad()
        assert w.grad is None

    def test_state_round_trip_continues_identically(self):
        def run(steps, resume_after=None):
            w = _param([1.0, -1.0])
            opt = AdamW({"w": w}, lr=0.05, weight_decay=0.01)
            for i in range(steps):
                if resume_after == i:
                    arrays = {k: v.copy() for k, v in opt.state_arrays().items()}
                    opt = AdamW({"w": w}, lr=0.05, weight_decay=0.01)
                    opt.load_state_arrays(arrays)
                w.grad = np.array([0.5, -0.25]) * (i + 1)
                opt.step()
            return w.values

        np.testing.assert_array_equal(run(5), run(5, resume_after=2))

    def test_state_arrays_layout(self):
        w = _param([1.0])
        opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
        w.grad = np.array([1.0])
        opt.step()
        assert set(opt.state_arrays()) == {"step", "m/w", "v/w"}
