"""Deterministic test-time inference and the Spearman evaluation metric."""

import logging
from typing import Callable, Optional

import numpy as np

from data import ClipDataset, default_preprocess_config
from models import PreprocessConfig, SamplerConfig, SamplingStrategy
from networks import AQAModel
from ranking import UndefinedCorrelationError, spearman

logger = logging.getLogger(__name__)

ScoreTransform = Callable[[np.ndarray], np.ndarray]


def eval_sampler_config(n_frames: int) -> SamplerConfig:
    """First frame of every subclip."""
    return SamplerConfig(strategy=SamplingStrategy.FIXED_OFFSET, n_frames=n_frames, fixed_offset_k=0)


def eval_preprocess_config(model: AQAModel, preprocess_cfg: Optional[PreprocessConfig] = None) -> PreprocessConfig:
    """Center crop, no flip; normalization follows the training setting."""
    if preprocess_cfg is None:
        return default_preprocess_config(model.cfg.image_size, augment=False)
    return preprocess_cfg.model_copy(update={"augment": False})


def predict_split(
    model: AQAModel,
    dataset: ClipDataset,
    preprocess_cfg: Optional[PreprocessConfig] = None,
    batch_size: int = 16,
) -> np.ndarray:
    """Raw [B, 2] predictions for every clip of ``dataset``."""
    sampler_cfg = eval_sampler_config(model.cfg.n_frames)
    pcfg = eval_preprocess_config(model, preprocess_cfg)
    outputs = []
    for start in range(0, len(dataset), batch_size):
        indices = range(start, min(start + batch_size, len(dataset)))
        outputs.append(model.predict(dataset.load_batch(indices, sampler_cfg, pcfg)))
    return np.concatenate(outputs) if outputs else np.zeros((0, 2))


def final_scores(predictions: np.ndarray) -> np.ndarray:
    """Clamped normalized score times predicted difficulty."""
    return np.clip(predictions[:, 0], 0.0, 1.0) * predictions[:, 1]


def score_predictions(
    dataset: ClipDataset,
    predictions: np.ndarray,
    score_transform: Optional[ScoreTransform] = None,
) -> float:
    predicted = final_scores(predictions)
    if score_transform is not None:
        predicted = np.asarray(score_transform(predicted), dtype=np.float64)
    try:
        return spearman(dataset.final_scores(), predicted)
    except UndefinedCorrelationError as e:
        raise UndefinedCorrelationError(
            f"{e}: the model gives every test clip the same final score; "
            "train for more epochs, raise the learning rate or check that clips differ"
        ) from e


def evaluate(
    model: AQAModel,
    dataset: ClipDataset,
    preprocess_cfg: Optional[PreprocessConfig] = None,
    batch_size: int = 16,
    score_transform: Optional[ScoreTransform] = None,
) -> float:
    """Spearman correlation between true and predicted final scores on ``dataset``.

    ``score_transform`` is applied to the predicted final scores before
    ranking; any strictly increasing transform leaves the result unchanged.
    """
    if len(dataset) < 2:
        raise ValueError(f"evaluation needs at least 2 clips, got {len(dataset)}")
    rho = score_predictions(dataset, predict_split(model, dataset, preprocess_cfg, batch_size), score_transform)
    logger.debug(f"Evaluated {len(dataset)} clips: spearman={rho:.4f}")
    return rho
