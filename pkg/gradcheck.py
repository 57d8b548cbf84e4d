"""Finite-difference gradient checking and the built-in check suites."""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

import diffcore as dc
from diffcore import Tensor, no_grad

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
# Below this magnitude errors are measured absolutely.
RELATIVE_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    max_abs_err: float
    max_rel_err: float
    per_param_errors: Dict[str, List[Tuple[float, float]]]
    passed: bool
    tolerance: float
    failure: Optional[str] = None
    checked: int = 0

    def summary(self) -> str:
        status = "PASSED" if self.passed else "FAILED"
        line = (
            f"{status}: {self.checked} coordinates, max_abs_err={self.max_abs_err:.3e}, "
            f"max_rel_err={self.max_rel_err:.3e} (tol {self.tolerance:.1e})"
        )
        if self.failure:
            line += f"; {self.failure}"
        return line

    def worst_by_param(self) -> Dict[str, float]:
        """Largest relative error per parameter path."""
        return {
            name: max((_relative_error(a, n) for a, n in pairs), default=0.0)
            for name, pairs in self.per_param_errors.items()
        }


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), RELATIVE_FLOOR)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = DEFAULT_STEP,
    tol: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against (f(p+h) - f(p-h)) / 2h.

    ``f`` must be deterministic (fixed dropout masks and seeds). When
    ``max_coords`` is set, that many coordinates are sampled uniformly across
    all parameters instead of checking every one.
    """
    for tensor in params.values():
        tensor.zero_grad()
    loss = f()
    if not np.all(np.isfinite(loss.values)):
        return GradCheckReport(0.0, float("inf"), {}, False, tol, failure="loss is non-finite")
    loss.backward()

    analytic: Dict[str, np.ndarray] = {}
    for path, tensor in params.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.values)
        if not np.all(np.isfinite(grad)):
            return GradCheckReport(
                0.0, float("inf"), {}, False, tol, failure=f"non-finite analytic gradient at {path}"
            )
        analytic[path] = grad

    coords = [(path, i) for path, tensor in params.items() for i in range(tensor.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    per_param: Dict[str, List[Tuple[float, float]]] = {}
    max_abs, max_rel = 0.0, 0.0
    for path, index in coords:
        tensor = params[path]
        if not tensor.values.flags.c_contiguous or not tensor.values.flags.writeable:
            tensor.values = np.array(tensor.values, order="C")
        flat = tensor.values.reshape(-1)
        original = flat[index]
        with no_grad():
            flat[index] = original + h
            plus = f().item()
            flat[index] = original - h
            minus = f().item()
        flat[index] = original
        numeric = (plus - minus) / (2.0 * h)
        if not np.isfinite(numeric):
            return GradCheckReport(
                max_abs, float("inf"), per_param, False, tol,
                failure=f"non-finite numeric gradient at {path}[{index}]",
                checked=len(coords),
            )
        exact = float(analytic[path].reshape(-1)[index])
        per_param.setdefault(path, []).append((exact, numeric))
        max_abs = max(max_abs, abs(exact - numeric))
        max_rel = max(max_rel, _relative_error(exact, numeric))

    report = GradCheckReport(
        max_abs_err=max_abs,
        max_rel_err=max_rel,
        per_param_errors=per_param,
        passed=max_rel <= tol,
        tolerance=tol,
        checked=len(coords),
    )
    logger.debug(f"grad_check: {report.summary()}")
    return report


def merge_reports(reports: Mapping[str, GradCheckReport], tol: float) -> GradCheckReport:
    """Fold named reports into one, prefixing parameter paths with the name."""
    per_param: Dict[str, List[Tuple[float, float]]] = {}
    failures = []
    for name, report in reports.items():
        for path, pairs in report.per_param_errors.items():
            per_param[f"{name}/{path}"] = pairs
        if report.failure:
            failures.append(f"{name}: {report.failure}")
        elif not report.passed:
            failures.append(f"{name}: max_rel_err {report.max_rel_err:.3e}")
    return GradCheckReport(
        max_abs_err=max((r.max_abs_err for r in reports.values()), default=0.0),
        max_rel_err=max((r.max_rel_err for r in reports.values()), default=0.0),
        per_param_errors=per_param,
        passed=all(r.passed for r in reports.values()),
        tolerance=tol,
        failure="; ".join(failures) or None,
        checked=sum(r.checked for r in reports.values()),
    )


def _random_param(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.uniform(-2.0, 2.0, size=shape), requires_grad=True)


def diffcore_checks(rng: np.random.Generator) -> Dict[str, Tuple[Callable[[], Tensor], Dict[str, Tensor]]]:
    """One small scalar-valued function per engine op, over random inputs in (-2, 2)."""
    a, b = _random_param(rng, 3, 4), _random_param(rng, 4)
    m = _random_param(rng, 2, 4, 3)
    positive = Tensor(rng.uniform(0.5, 2.0, size=(5,)), requires_grad=True)
    table = _random_param(rng, 6, 3)
    video = _random_param(rng, 1, 2, 3, 4, 4)
    kernel = _random_param(rng, 2, 2, 2, 3, 3)
    kernel_bias = _random_param(rng, 2)
    weights = Tensor(rng.normal(size=(3, 4)))
    mask = rng.random((3, 4)) >= 0.3
    return {
        "add": (lambda: ((a + b) * weights).sum(), {"a": a, "b": b}),
        "sub": (lambda: ((a - b) * weights).sum(), {"a": a, "b": b}),
        "mul": (lambda: (a * b * weights).sum(), {"a": a, "b": b}),
        "matmul": (lambda: (dc.matmul(m, a) * 0.5).sum(), {"m": m, "a": a}),
        "transpose": (lambda: (dc.transpose(m, (2, 0, 1)) * dc.transpose(m, (2, 0, 1))).sum(), {"m": m}),
        "reshape": (lambda: (dc.reshape(a, (2, 6)) * dc.reshape(weights, (2, 6))).sum(), {"a": a}),
        "concat": (lambda: (dc.concat([a, a * a], axis=0) * 0.3).sum(), {"a": a}),
        "slice": (lambda: (a[1:, ::2] * a[:2, 1::2]).sum(), {"a": a}),
        "sum": (lambda: (dc.sum_(m, axis=1) ** 2).sum(), {"m": m}),
        "mean": (lambda: (dc.mean(m, axis=(0, 2)) ** 2).sum(), {"m": m}),
        "softmax": (lambda: (dc.softmax(a) * weights).sum(), {"a": a}),
        "layer_norm": (lambda: (dc.layer_norm(a) * weights).sum(), {"a": a}),
        "gelu": (lambda: (dc.gelu(a) * weights).sum(), {"a": a}),
        "relu": (lambda: (dc.relu(a) * weights).sum(), {"a": a}),
        "dropout": (lambda: (dc.dropout(a, 0.3, mask=mask) * weights).sum(), {"a": a}),
        "embedding": (lambda: (dc.embedding(table, [0, 2, 2, 5]) ** 2).sum(), {"table": table}),
        "power": (lambda: (dc.power(positive, 1.5)).sum(), {"x": positive}),
        "sqrt": (lambda: (dc.sqrt(positive) * positive).sum(), {"x": positive}),
        "exp": (lambda: dc.exp(a * 0.5).sum(), {"a": a}),
        "log": (lambda: dc.log(positive).sum(), {"x": positive}),
        "conv3d": (
            lambda: (dc.conv3d(video, kernel, kernel_bias, stride=(1, 2, 1), padding=(1, 1, 0)) ** 2).mean(),
            {"video": video, "kernel": kernel, "bias": kernel_bias},
        ),
    }


def run_diffcore_suite(tol: float = 1e-5, seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    reports = {
        name: grad_check(f, params, tol=tol)
        for name, (f, params) in diffcore_checks(rng).items()
    }
    return merge_reports(reports, tol)


def run_ranking_suite(tol: float = 1e-4, seed: int = 0) -> GradCheckReport:
    from models import LossConfig
    from ranking import mse_spearman_loss, soft_rank, soft_spearman

    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-2.0, 2.0, size=8), requires_grad=True)
    weights = rng.normal(size=8)
    y = rng.uniform(-2.0, 2.0, size=8)
    targets = np.column_stack([rng.uniform(0.2, 1.0, 8), rng.uniform(2.0, 4.0, 8)])
    preds = Tensor(targets + rng.normal(scale=0.3, size=targets.shape), requires_grad=True)
    loss_cfg = LossConfig(alpha=1.0, beta=1.0, epsilon=0.1)
    checks = {
        "soft_rank": (lambda: (soft_rank(x, 0.1) * weights).sum(), {"x": x}),
        "soft_spearman": (lambda: soft_spearman(y, x, 0.1), {"y_hat": x}),
        "mse_spearman_loss": (lambda: mse_spearman_loss(targets, preds, loss_cfg), {"y_hat": preds}),
    }
    reports = {name: grad_check(f, params, tol=tol) for name, (f, params) in checks.items()}
    return merge_reports(reports, tol)


def run_model_suite(tol: float = 1e-3, seed: int = 0, coords: int = 64) -> GradCheckReport:
    from networks import ArchitectureFactory, minimal_config
    from models import LossConfig, Variant
    from ranking import mse_spearman_loss

    rng = np.random.default_rng(seed)
    loss_cfg = LossConfig(alpha=1.0, beta=1.0, epsilon=0.1)
    reports = {}
    for variant in Variant:
        cfg = minimal_config(variant)
        model = ArchitectureFactory.create(cfg, seed=seed)
        clips = rng.normal(size=(3, cfg.n_frames, 3, cfg.image_size, cfg.image_size))
        targets = np.column_stack([rng.uniform(0.2, 1.0, 3), rng.uniform(2.0, 4.0, 3)])

        def loss_fn(model=model, clips=clips, targets=targets):
            model.train()
            model.seed_dropout(seed)
            return mse_spearman_loss(targets, model(clips), loss_cfg)

        reports[variant.value] = grad_check(
            loss_fn, model.parameters(), tol=tol, max_coords=coords, seed=seed
        )
    return merge_reports(reports, tol)


SUITES: Dict[str, Callable[..., GradCheckReport]] = {
    "diffcore": run_diffcore_suite,
    "ranking": run_ranking_suite,
    "model": run_model_suite,
}


def run_suite(name: str, tol: Optional[float] = None, seed: int = 0, coords: Optional[int] = None) -> GradCheckReport:
    """Run one named suite, or every suite for ``name == "all"``.

    ``coords`` bounds the sampled coordinates per parameter of the model suite.
    """
    if name == "all":
        reports = {suite: run_suite(suite, tol, seed, coords) for suite in SUITES}
        return merge_reports(reports, max(r.tolerance for r in reports.values()))
    if name not in SUITES:
        raise ValueError(f"Unknown grad-check suite: {name}. Available: {list(SUITES) + ['all']}")
    kwargs: Dict[str, Any] = {"seed": seed}
    if tol is not None:
        kwargs["tol"] = tol
    if coords is not None and name == "model":
        kwargs["coords"] = coords
    return SUITES[name](**kwargs)
