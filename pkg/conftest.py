"""Shared fixtures for the aqa-transformer test suite.

Slow acceptance-scale tests are skipped unless ``AQA_RUN_SLOW=1``.
"""

import logging
import os

import numpy as np
import pytest

import diffcore
from data import default_preprocess_config, synth_dataset
from models import LossConfig, SamplerConfig, TrainConfig, Variant
from networks import minimal_config


def pytest_collection_modifyitems(config, items):
    if os.environ.get("AQA_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set AQA_RUN_SLOW=1 to run acceptance-scale training")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_environment(monkeypatch, tmp_path):
    """Keep log files out of the home directory and restore engine defaults."""
    monkeypatch.setenv("AQA_LOG_DIR", str(tmp_path / "logs"))
    yield
    diffcore.set_default_dtype("float64")
    root = logging.getLogger()
    for handler in [h for h in root.handlers if getattr(h, "_aqa_handler", False)]:
        root.removeHandler(handler)
        handler.close()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """Two frames of 8x8 pixels through the space-time encoder."""
    return minimal_config(Variant.ENCODER_MLP)


@pytest.fixture
def tiny_dataset():
    """24 synthetic clips of 8 frames at 12x12 (5 test clips)."""
    return synth_dataset(24, 8, 12, 12, rng_seed=3)


@pytest.fixture
def tiny_preprocess(tiny_model_config):
    return default_preprocess_config(tiny_model_config.image_size)


@pytest.fixture
def tiny_train_config(tiny_model_config):
    return TrainConfig(
        epochs=2,
        batch_size=4,
        learning_rate=1e-3,
        weight_decay=1e-4,
        loss=LossConfig(alpha=1.0, beta=1.0),
        sampler=SamplerConfig(n_frames=tiny_model_config.n_frames),
        seed=7,
        checkpoint_every=1,
    )
