"""Experiments and hyperparameter sweeps: presets, result rows, tables and CSV."""

import csv
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from config import ConfigError, build_experiment_config, dump_experiment_config, resolve_axis, with_value
from data import ClipDataset, build_dataset
from evaluation import evaluate
from models import DataConfig, ExperimentConfig
from networks import ArchitectureFactory
from train import TrainResult, train

logger = logging.getLogger(__name__)

RESULTS_HEADER = ("axis_value", "spearman", "wall_time_s")
RESULTS_FILE = "results.csv"
TABLE_FILE = "table.txt"
REFERENCE_COLUMN = "paper (full scale)"


@dataclass(frozen=True)
class ResultRow:
    """One trained-and-evaluated sweep point; ``spearman`` is None when the row failed."""

    axis_value: str
    spearman: Optional[float]
    wall_time_s: float
    config_summary: str = field(default="", compare=False)
    error: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.spearman is not None and not -1.0 <= self.spearman <= 1.0:
            raise ValueError(f"spearman must lie in [-1, 1], got {self.spearman}")


@dataclass(frozen=True)
class SweepSpec:
    """A base experiment, one axis (one or more keys varied together) and its values."""

    name: str
    base: ExperimentConfig
    axis: Tuple[str, ...]
    values: Tuple[Tuple[Any, ...], ...]
    labels: Tuple[str, ...] = ()
    columns: Tuple[str, ...] = ()
    reference: Dict[str, float] = field(default_factory=dict)
    epochs_override: Optional[int] = None
    output_path: Optional[str] = None

    def __post_init__(self):
        if not self.values:
            raise ConfigError(f"sweep {self.name!r} has no values")
        for key in self.axis:
            resolve_axis(key)
        for value in self.values:
            if len(value) != len(self.axis):
                raise ConfigError(f"sweep {self.name!r}: value {value} does not match axis {self.axis}")
        if self.labels and len(self.labels) != len(self.values):
            raise ConfigError(f"sweep {self.name!r}: {len(self.labels)} labels for {len(self.values)} values")

    def label(self, index: int) -> str:
        if self.labels:
            return self.labels[index]
        return " ".join(_format_cell(v) for v in self.values[index])

    def header(self) -> Tuple[str, ...]:
        return self.columns or tuple(key.rsplit(".", 1)[-1] for key in self.axis)

    def config_for(self, index: int) -> ExperimentConfig:
        cfg = self.base
        if self.epochs_override is not None:
            cfg = with_value(cfg, "train.epochs", self.epochs_override)
        for key, value in zip(self.axis, self.values[index]):
            cfg = with_value(cfg, key, value)
        return cfg


def _format_cell(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return " ".join(_format_cell(v) for v in value)
    if isinstance(value, bool):
        return "on" if value else "off"
    if hasattr(value, "value"):
        return str(value.value)
    return f"{value:g}" if isinstance(value, float) else str(value)


def _toy_base(variant: str, **settings) -> ExperimentConfig:
    """Desk-scale base: 640 synthetic 32x32 clips of 64 frames, 8 sampled, 30 epochs."""
    defaults = {
        "model.variant": variant,
        "train.epochs": 30,
        "train.batch_size": 16,
        "train.learning_rate": 1e-3,
        "train.weight_decay": 1e-4,
    }
    return build_experiment_config({**defaults, **settings})


def _preset_specs() -> Dict[str, SweepSpec]:
    return {
        "learning-rate": SweepSpec(
            name="learning-rate",
            base=_toy_base("conv_mlp"),
            axis=("train.learning_rate",),
            values=((1e-6,), (5e-5,), (5e-4,), (5e-3,), (1e-2,)),
            columns=("Learning rate",),
            reference={"1e-06": 0.7064, "5e-05": 0.9113, "0.0005": 0.9037, "0.005": 0.7497, "0.01": 0.4846},
        ),
        "frames": SweepSpec(
            name="frames",
            base=_toy_base("conv_mlp"),
            axis=("model.n_frames",),
            values=((16,), (32,), (64,)),
            columns=("Frames",),
            reference={"16": 0.7990, "32": 0.9031, "64": 0.9226},
        ),
        "batch-size": SweepSpec(
            name="batch-size",
            base=_toy_base("conv_decoder", **{"model.n_decoder_heads": 4, "model.n_decoder_layers": 2}),
            axis=("train.batch_size",),
            values=((4,), (16,), (32,)),
            columns=("Batch size",),
            reference={"4": 0.8898, "16": 0.9105, "32": 0.9168},
        ),
        "decoder": SweepSpec(
            name="decoder",
            base=_toy_base("conv_decoder"),
            axis=("model.n_decoder_heads", "model.n_decoder_layers"),
            values=((4, 2), (4, 6), (8, 1), (8, 6)),
            columns=("Heads", "Layers"),
            reference={"4 2": 0.9317, "4 6": 0.9097, "8 1": 0.8587, "8 6": 0.5436},
        ),
        "sampling": SweepSpec(
            name="sampling",
            base=_toy_base("encoder_mlp"),
            axis=("sampler.strategy",),
            values=(("random",), ("fixed_offset",), ("varied_offset",)),
            columns=("Sampling method",),
            reference={"random": 0.9239, "fixed_offset": 0.9218, "varied_offset": 0.9284},
        ),
        "preprocessing": SweepSpec(
            name="preprocessing",
            base=_toy_base("encoder_mlp"),
            axis=("preprocess.normalize", "preprocess.augment"),
            values=((False, False), (True, True)),
            columns=("Normalization", "Augmentation"),
            reference={"off off": 0.9218, "on on": 0.9255},
        ),
        "mlp-topology": SweepSpec(
            name="mlp-topology",
            base=_toy_base("encoder_mlp"),
            axis=("model.mlp_topology",),
            values=(
                ((768, 2),),
                ((512, 512, 2),),
                ((768, 768, 2),),
                ((768, 768, 768, 2),),
                ((768, 768, 768, 768, 2),),
            ),
            labels=("768", "512 512", "768 768", "768 768 768", "768 768 768 768"),
            columns=("Hidden widths",),
            reference={"768": 0.9165, "512 512": 0.9288, "768 768": 0.9218, "768 768 768": 0.9244, "768 768 768 768": 0.9219},
        ),
        "alpha-beta": SweepSpec(
            name="alpha-beta",
            base=_toy_base("encoder_decoder"),
            axis=("loss.alpha", "loss.beta"),
            values=((0.0, 1.0), (1.0, 0.0), (1.0, 10.0), (1.0, 1.0)),
            columns=("α", "β"),
            reference={"0 1": 0.3429, "1 0": 0.9050, "1 10": 0.9063, "1 1": 0.9163},
        ),
        "weight-decay": SweepSpec(
            name="weight-decay",
            base=_toy_base("encoder_decoder"),
            axis=("train.weight_decay",),
            values=((0.0,), (1e-5,)),
            columns=("Weight decay",),
            reference={"0": 0.9204, "1e-05": 0.9142},
        ),
    }


PRESETS: Dict[str, SweepSpec] = _preset_specs()


def get_preset(name: str) -> SweepSpec:
    if name not in PRESETS:
        raise ConfigError(f"Unknown sweep preset: {name}. Available: {list(PRESETS)}")
    return PRESETS[name]


def run_experiment(
    cfg: ExperimentConfig,
    dataset: Optional[ClipDataset] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> Tuple[TrainResult, float]:
    """Build, train and evaluate one model; returns the training result and held-out Spearman."""
    dataset = dataset if dataset is not None else build_dataset(cfg.data)
    model = ArchitectureFactory.create(cfg.model, seed=cfg.train.seed)
    result = train(model, dataset, cfg.train, cfg.preprocess, output_dir=output_dir)
    rho = evaluate(model, dataset.split("test"), cfg.preprocess, cfg.train.eval_batch_size)
    return result, rho


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", label).strip("_") or "row"


def _run_row(spec: SweepSpec, index: int, datasets: Dict[DataConfig, ClipDataset], output_dir: Optional[Path]) -> ResultRow:
    label = spec.label(index)
    started = time.perf_counter()
    summary = ""
    try:
        cfg = spec.config_for(index)
        summary = " ".join(f"{k}={_format_cell(v)}" for k, v in zip(spec.axis, spec.values[index]))
        row_dir = output_dir / "rows" / _slug(label) if output_dir is not None else None
        _, rho = run_experiment(cfg, datasets[cfg.data], output_dir=row_dir)
        row = ResultRow(label, rho, time.perf_counter() - started, summary)
        logger.info(f"[{spec.name}] {label}: spearman={rho:.4f}", extra={"axis_value": label, "spearman": rho})
        return row
    except Exception as e:
        logger.error(f"[{spec.name}] {label} failed: {e}", exc_info=True, extra={"axis_value": label})
        return ResultRow(label, None, time.perf_counter() - started, summary, error=f"{type(e).__name__}: {e}")


def run_sweep(spec: SweepSpec, workers: int = 0) -> List[ResultRow]:
    """Train one model per axis value with the shared seed; failed rows are recorded, not raised.

    Writes ``results.csv``, ``table.txt`` and per-row train logs under
    ``spec.output_path`` when set.
    """
    output_dir = Path(spec.output_path) if spec.output_path else None
    datasets: Dict[DataConfig, ClipDataset] = {}
    for index in range(len(spec.values)):
        try:
            data_cfg = spec.config_for(index).data
        except Exception:
            continue
        if data_cfg not in datasets:
            datasets[data_cfg] = build_dataset(data_cfg)

    logger.info(f"Running sweep {spec.name} over {len(spec.values)} values", extra={"axis": spec.axis})
    indices = range(len(spec.values))
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="sweep") as pool:
            rows = list(pool.map(lambda i: _run_row(spec, i, datasets, output_dir), indices))
    else:
        rows = [_run_row(spec, i, datasets, output_dir) for i in indices]

    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        write_results_csv(output_dir / RESULTS_FILE, rows)
        (output_dir / TABLE_FILE).write_text(render_table(spec, rows), encoding="utf-8")
        (output_dir / "base_config.txt").write_text(dump_experiment_config(spec.base), encoding="utf-8")
    return rows


def render_table(spec: SweepSpec, rows: Sequence[ResultRow]) -> str:
    """Plain-text table: one column per axis key, the measured correlation, the full-scale reference."""
    header = [*spec.header(), "Sp. Corr.", REFERENCE_COLUMN]
    body = []
    for index, row in enumerate(rows):
        cells = [_format_cell(v) for v in spec.values[index]] if index < len(spec.values) else [row.axis_value]
        measured = f"{row.spearman:.4f}" if row.spearman is not None else "failed"
        reference = spec.reference.get(row.axis_value)
        body.append([*cells, measured, f"{reference:.4f}" if reference is not None else "-"])
    widths = [max(len(str(r[i])) for r in [header, *body]) for i in range(len(header))]
    lines = [f"Sweep: {spec.name}", "  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(cells, widths)) for cells in body)
    return "\n".join(lines) + "\n"


def write_results_csv(path: Union[str, Path], rows: Sequence[ResultRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(RESULTS_HEADER)
        for row in rows:
            spearman = "" if row.spearman is None else repr(row.spearman)
            writer.writerow([row.axis_value, spearman, repr(row.wall_time_s)])
    return path


def load_results_csv(path: Union[str, Path]) -> List[ResultRow]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if tuple(header or ()) != RESULTS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [
            ResultRow(label, float(spearman) if spearman else None, float(wall))
            for label, spearman, wall in reader
        ]
