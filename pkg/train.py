"""Training loop: per-epoch frame re-sampling, MSE-Spearman loss, AdamW, checkpoints."""

import logging
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Iterator, List, Optional, Sequence, Union

import numpy as np

from data import ClipDataset, default_preprocess_config
from evaluation import evaluate
from models import PreprocessConfig, TrainConfig
from networks import AQAModel
from optim import AdamW, NonFiniteGradientError
from ranking import UndefinedCorrelationError, mse_spearman_terms
from session import LogRow, TrainLog, TrainSession

logger = logging.getLogger(__name__)

LAST_DIR = "last"
BEST_DIR = "best"
# Batches loaded ahead of the training step, per prefetch worker.
PREFETCH_PER_WORKER = 2


class TrainingError(RuntimeError):
    """Raised when a run cannot start or produces non-finite values."""


@dataclass
class TrainResult:
    model: AQAModel
    log: TrainLog
    best_eval: Optional[float] = None


def epoch_learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Constant rate, ramped linearly over the first ``warmup_epochs`` epochs."""
    if cfg.warmup_epochs and epoch <= cfg.warmup_epochs:
        return cfg.learning_rate * epoch / cfg.warmup_epochs
    return cfg.learning_rate


def epoch_batches(n: int, cfg: TrainConfig, epoch: int) -> List[np.ndarray]:
    """Shuffled index batches; a trailing single-clip batch is dropped when the loss ranks."""
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    batches = [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    if cfg.loss.beta > 0 and batches and len(batches[-1]) < 2:
        logger.debug(f"Epoch {epoch}: dropping trailing batch of {len(batches[-1])} clip")
        batches.pop()
    return batches


def _clip_seeds(cfg: TrainConfig, epoch: int):
    plan_epoch = 0 if cfg.freeze_frame_plans else epoch

    def seeds(index: int):
        return (
            [cfg.sampler.rng_seed, cfg.seed, plan_epoch, int(index)],
            [cfg.sampler.rng_seed, cfg.seed, epoch, int(index), 1],
        )

    return seeds


def _iter_batches(
    dataset: ClipDataset,
    batches: Sequence[np.ndarray],
    cfg: TrainConfig,
    preprocess_cfg: PreprocessConfig,
    epoch: int,
) -> Iterator[np.ndarray]:
    seeds = _clip_seeds(cfg, epoch)

    def load(batch):
        return dataset.load_batch(batch, cfg.sampler, preprocess_cfg, seeds)

    if cfg.workers > 0:
        with ThreadPoolExecutor(max_workers=cfg.workers, thread_name_prefix="prefetch") as pool:
            pending: Deque[Future] = deque()
            for batch in batches:
                pending.append(pool.submit(load, batch))
                if len(pending) >= PREFETCH_PER_WORKER * cfg.workers:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()
    else:
        for batch in batches:
            yield load(batch)


def _all_finite(model: AQAModel) -> bool:
    return all(np.all(np.isfinite(t.values)) for t in model.parameters().values())


def train(
    model: AQAModel,
    dataset: ClipDataset,
    cfg: TrainConfig,
    preprocess_cfg: Optional[PreprocessConfig] = None,
    output_dir: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Train ``model`` in place on the train split and evaluate on the test split each epoch.

    All randomness derives from ``cfg.seed`` and the epoch/step counters, so
    equal seeds give identical logs (wall time aside) and a run resumed from a
    session directory continues exactly as if uninterrupted.
    """
    train_split = dataset.split("train")
    test_split = dataset.split("test")
    if len(train_split) == 0:
        raise TrainingError("training split is empty")
    if cfg.sampler.n_frames != model.cfg.n_frames:
        raise TrainingError(
            f"sampler.n_frames ({cfg.sampler.n_frames}) != model n_frames ({model.cfg.n_frames})"
        )
    pcfg = preprocess_cfg or default_preprocess_config(model.cfg.image_size)
    optimizer = AdamW(model.parameters(), cfg.learning_rate, cfg.weight_decay)
    log = TrainLog()
    best_eval: Optional[float] = None
    start_epoch = 0

    if resume_from is not None:
        resumed = TrainSession(resume_from).restore()
        model.load_state_dict(resumed.model.state_dict())
        optimizer.load_state_arrays(resumed.optimizer_arrays)
        start_epoch, best_eval, log = resumed.epochs_done, resumed.best_eval, resumed.log
        logger.info(f"Resuming from {resume_from} after epoch {start_epoch}")

    if start_epoch >= cfg.epochs:
        return TrainResult(model, log, best_eval)
    if len(test_split) < 2:
        raise TrainingError(f"test split needs at least 2 clips, got {len(test_split)}")

    output_dir = Path(output_dir) if output_dir is not None else None
    targets = train_split.targets()
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        started = time.perf_counter()
        model.train()
        lr = epoch_learning_rate(cfg, epoch)
        batches = epoch_batches(len(train_split), cfg, epoch)
        losses, correlations = [], []
        for step, (batch, clips) in enumerate(zip(batches, _iter_batches(train_split, batches, cfg, pcfg, epoch))):
            model.seed_dropout([cfg.seed, epoch, step])
            optimizer.zero_grad()
            terms = mse_spearman_terms(targets[batch], model(clips), cfg.loss)
            loss = terms.total.item()
            if not np.isfinite(loss):
                raise TrainingError(f"epoch {epoch}, step {step}: loss is {loss}")
            terms.total.backward()
            try:
                grad_norm = optimizer.step(lr=lr, max_grad_norm=cfg.grad_clip)
            except NonFiniteGradientError as e:
                raise TrainingError(f"epoch {epoch}, step {step}: {e}") from e
            losses.append(loss)
            if terms.spearman is not None:
                correlations.append(terms.spearman)
            logger.debug(
                f"epoch {epoch} step {step}: loss={loss:.5f}",
                extra={"epoch": epoch, "step": step, "mse": terms.mse, "grad_norm": grad_norm},
            )
        if not _all_finite(model):
            raise TrainingError(f"epoch {epoch}: parameters became non-finite")

        try:
            eval_rho = evaluate(model, test_split, pcfg, cfg.eval_batch_size)
        except UndefinedCorrelationError as e:
            logger.warning(f"Epoch {epoch}: evaluation correlation undefined, recording 0 ({e})")
            eval_rho = 0.0
        row = LogRow(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else 0.0,
            train_spearman=float(np.mean(correlations)) if correlations else 0.0,
            eval_spearman=eval_rho,
            wall_time_s=time.perf_counter() - started,
        )
        log.append(row)
        logger.info(
            f"Epoch {epoch}/{cfg.epochs}: loss={row.train_loss:.4f} "
            f"train_sp={row.train_spearman:.4f} eval_sp={row.eval_spearman:.4f}",
            extra={"epoch": epoch, "loss": row.train_loss, "spearman": row.eval_spearman},
        )

        if output_dir is not None:
            if best_eval is None or eval_rho > best_eval:
                best_eval = eval_rho
                TrainSession(output_dir / BEST_DIR).save(model, optimizer, epoch, log, best_eval)
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                TrainSession(output_dir / LAST_DIR).save(model, optimizer, epoch, log, best_eval)
            log.to_csv(output_dir / "train_log.csv")
        elif best_eval is None or eval_rho > best_eval:
            best_eval = eval_rho

    return TrainResult(model, log, best_eval)
