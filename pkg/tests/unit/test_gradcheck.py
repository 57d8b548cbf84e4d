"""Tests for finite-difference gradient checking."""

import numpy as np
import pytest

from diffcore import Tensor, log, softmax
from gradcheck import SUITES, grad_check, merge_reports, run_suite


def _wrong_square(x: Tensor) -> Tensor:
    """x**2 with a deliberately wrong backward rule (3x instead of 2x)."""
    return Tensor.from_op("bad_square", x.values**2, (x,), lambda g: (g * 3.0 * x.values,))


class TestGradCheck:
    def test_correct_gradient_passes(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=5), requires_grad=True)
        report = grad_check(lambda: (x * x * x).sum(), {"x": x})
        assert report.passed
        assert report.checked == 5
        assert report.max_rel_err < 1e-6

    def test_wrong_gradient_fails(self, rng):
        x = Tensor(rng.uniform(0.5, 1.0, size=4), requires_grad=True)
        report = grad_check(lambda: _wrong_square(x).sum(), {"x": x})
        assert not report.passed
        assert report.max_rel_err > 0.3
        assert "FAILED" in report.summary()

    def test_max_coords_samples_subset(self, rng):
        x = Tensor(rng.normal(size=(10, 10)), requires_grad=True)
        report = grad_check(lambda: (x * x).sum(), {"x": x}, max_coords=7)
        assert report.checked == 7
        assert sum(len(v) for v in report.per_param_errors.values()) == 7

    def test_parameters_restored_after_check(self, rng):
        values = rng.normal(size=6)
        x = Tensor(values.copy(), requires_grad=True)
        grad_check(lambda: (x * x).sum(), {"x": x})
        np.testing.assert_array_equal(x.values, values)

    def test_non_finite_loss_reported(self):
        x = Tensor([0.0], requires_grad=True)
        report = grad_check(lambda: (x * np.inf).sum(), {"x": x})
        assert not report.passed
        assert "non-finite" in report.failure

    def test_merge_reports_prefixes_paths(self, rng):
        x = Tensor(rng.normal(size=2), requires_grad=True)
        good = grad_check(lambda: (x * x).sum(), {"x": x})
        merged = merge_reports({"a": good, "b": good}, tol=1e-5)
        assert set(merged.per_param_errors) == {"a/x", "b/x"}
        assert merged.checked == 4
        assert merged.passed

    def test_worst_by_param(self, rng):
        x = Tensor(rng.uniform(0.5, 1.0, size=3), requires_grad=True)
        y = Tensor(rng.uniform(0.5, 1.0, size=2), requires_grad=True)
        report = grad_check(lambda: (x * x).sum() + _wrong_square(y).sum(), {"x": x, "y": y})
        worst = report.worst_by_param()
        assert set(worst) == {"x", "y"}
        assert worst["x"] < 1e-6
        assert worst["y"] == pytest.approx(report.max_rel_err)

    def test_softmax_cross_entropy(self, rng):
        inputs = Tensor(rng.normal(size=(3, 5)))
        weights = Tensor(rng.normal(scale=0.5, size=(5, 4)), requires_grad=True)
        targets = np.eye(4)[[0, 3, 1]]

        def loss():
            probs = softmax(inputs @ weights)
            return -(log(probs) * targets).sum() * (1.0 / 3)

        report = grad_check(loss, {"w": weights}, tol=1e-5)
        assert report.passed, report.summary()
        assert report.checked == 20


class TestSuites:
    """The built-in suites pass at their documented tolerances."""

    def test_diffcore_suite(self):
        report = run_suite("diffcore")
        assert report.passed, report.summary()
        assert report.tolerance == 1e-5

    def test_ranking_suite(self):
        report = run_suite("ranking")
        assert report.passed, report.summary()

    def test_model_suite(self):
        report = run_suite("model", coords=64)
        assert report.passed, report.summary()
        assert report.tolerance == 1e-3
        assert report.checked == 64 * 4

    def test_unknown_suite(self):
        with pytest.raises(ValueError, match="Unknown grad-check suite"):
            run_suite("nope")

    def test_registry_lists_three_suites(self):
        assert set(SUITES) == {"diffcore", "ranking", "model"}
