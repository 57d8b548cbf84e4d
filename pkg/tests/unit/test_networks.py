"""Tests for the four regression pipelines and their building blocks."""

import numpy as np
import pytest

from diffcore import Tensor
from gradcheck import grad_check
from models import ModelConfig, Variant
from networks import (
    ArchitectureError,
    ArchitectureFactory,
    ConvEncoder,
    DividedSpaceTimeBlock,
    PatchEmbedding,
    PredictionPair,
    SpaceTimeEncoder,
    TransformerDecoder,
    full_scale_config,
    load_model,
    minimal_config,
    save_model,
)
from tests.helpers.factories import ModelConfigBuilder

VARIANTS = list(Variant)


def _clips(cfg: ModelConfig, batch: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(batch, cfg.n_frames, 3, cfg.image_size, cfg.image_size))


class TestVariants:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_batch_output_shape(self, variant):
        cfg = minimal_config(variant)
        model = ArchitectureFactory.create(cfg, seed=0)
        assert model.variant is variant
        assert model(_clips(cfg, 4)).shape == (4, 2)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_same_seed_same_weights(self, variant):
        cfg = minimal_config(variant)
        a = ArchitectureFactory.create(cfg, seed=5).state_dict()
        b = ArchitectureFactory.create(cfg, seed=5).state_dict()
        assert a.keys() == b.keys()
        for path in a:
            np.testing.assert_array_equal(a[path], b[path])

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_gradients_reach_every_parameter(self, variant):
        cfg = minimal_config(variant)
        model = ArchitectureFactory.create(cfg, seed=1)
        model(_clips(cfg, 3)).sum().backward()
        missing = [path for path, t in model.parameters().items() if t.grad is None]
        assert not missing

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_wrong_frame_count(self, variant):
        cfg = minimal_config(variant)
        model = ArchitectureFactory.create(cfg)
        bad = np.zeros((2, cfg.n_frames + 1, 3, cfg.image_size, cfg.image_size))
        with pytest.raises(ArchitectureError, match="expected clips"):
            model(bad)

    def test_wrong_rank(self):
        model = ArchitectureFactory.create(minimal_config("conv_mlp"))
        with pytest.raises(ArchitectureError):
            model(np.zeros((2, 3, 8, 8)))

    def test_unknown_variant(self):
        cfg = ModelConfig.model_construct(**{**minimal_config("conv_mlp").model_dump(), "variant": "rnn_mlp"})
        with pytest.raises(ArchitectureError, match="Unknown variant"):
            ArchitectureFactory.create(cfg)


class TestPredict:
    def test_eval_mode_is_deterministic_and_restored(self):
        cfg = ModelConfigBuilder().with_(dropout_mlp=0.5).build()
        model = ArchitectureFactory.create(cfg)
        clips = _clips(cfg, 3)
        first = model.predict(clips)
        np.testing.assert_array_equal(model.predict(clips), first)
        assert model.training
        model.eval()
        model.predict(clips)
        assert not model.training

    def test_predict_records_no_graph(self, tiny_model_config):
        model = ArchitectureFactory.create(tiny_model_config)
        model.predict(_clips(tiny_model_config, 2))
        assert all(t.grad is None for t in model.parameters().values())

    def test_prediction_pairs(self, tiny_model_config):
        model = ArchitectureFactory.create(tiny_model_config)
        pairs = model.predict_pairs(_clips(tiny_model_config, 2))
        assert len(pairs) == 2 and all(isinstance(p, PredictionPair) for p in pairs)


class TestPredictionPair:
    def test_final_score_is_product(self):
        assert PredictionPair(0.8, 3.0).final_score() == pytest.approx(2.4)

    def test_clamped_to_unit_range(self):
        assert PredictionPair(1.4, 2.0).final_score() == 2.0
        assert PredictionPair(-0.3, 2.0).final_score() == 0.0
        assert PredictionPair(1.4, 2.0).final_score(clamp=False) == pytest.approx(2.8)


class TestBlocks:
    def test_patch_embedding_token_count(self, tiny_model_config):
        embed = PatchEmbedding(tiny_model_config, np.random.default_rng(0))
        tokens = embed(_clips(tiny_model_config, 3))
        assert tokens.shape == (3, tiny_model_config.sequence_length, tiny_model_config.embed_dim)

    def test_patch_embedding_single_clip(self, tiny_model_config):
        embed = PatchEmbedding(tiny_model_config, np.random.default_rng(0))
        tokens = embed(_clips(tiny_model_config, 1)[0])
        assert tokens.shape == (tiny_model_config.sequence_length, tiny_model_config.embed_dim)

    def test_encoder_pooling(self, tiny_model_config):
        for pooling in ("cls", "mean"):
            cfg = tiny_model_config.model_copy(update={"pooling": pooling})
            encoder = SpaceTimeEncoder(cfg, np.random.default_rng(0))
            assert encoder.pool(encoder(_clips(cfg, 2))).shape == (2, cfg.embed_dim)

    def test_conv_encoder_single_clip(self):
        cfg = minimal_config("conv_mlp")
        encoder = ConvEncoder(cfg, np.random.default_rng(0))
        assert encoder(_clips(cfg, 1)[0]).shape == (cfg.embed_dim,)

    def test_decoder_unbatched_memory(self):
        decoder = TransformerDecoder(8, 2, 1, 3, np.random.default_rng(0))
        assert decoder(Tensor(np.ones((5, 8)))).shape == (3, 8)

    def test_decoder_rejects_empty_memory(self):
        decoder = TransformerDecoder(8, 2, 1, 1, np.random.default_rng(0))
        with pytest.raises(ArchitectureError, match="non-empty"):
            decoder(Tensor(np.zeros((2, 0, 8))))


class TestPersistence:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_save_and_load_predict_identically(self, tmp_path, variant):
        cfg = minimal_config(variant)
        model = ArchitectureFactory.create(cfg, seed=3)
        save_model(model, tmp_path / "m")
        restored = load_model(tmp_path / "m")
        assert restored.cfg == cfg
        clips = _clips(cfg, 2)
        np.testing.assert_array_equal(restored.predict(clips), model.predict(clips))


class TestFullScaleConfig:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_shapes_validate(self, variant):
        cfg = full_scale_config(variant)
        assert cfg.mlp_topology == (512, 512, 2)
        assert cfg.image_size == 224 and cfg.patch_size == 16

    def test_embedding_width_follows_backbone(self):
        assert full_scale_config("conv_decoder").embed_dim == 1024
        encoder = full_scale_config("encoder_mlp")
        assert encoder.embed_dim == 768
        assert encoder.sequence_length == 1 + 32 * 196


class TestInvariances:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_batch_permutation_equivariance(self, variant):
        cfg = minimal_config(variant)
        model = ArchitectureFactory.create(cfg, seed=2)
        clips = _clips(cfg, 5, seed=4)
        order = np.array([3, 0, 4, 1, 2])
        np.testing.assert_allclose(model.predict(clips[order]), model.predict(clips)[order], atol=1e-12)

    def test_cls_token_sees_every_patch(self):
        n, p, dim = 2, 3, 8
        rng = np.random.default_rng(0)
        blocks = [DividedSpaceTimeBlock(dim, 2, n, p, rng) for _ in range(2)]
        tokens = Tensor(rng.normal(size=(1, 1 + n * p, dim)), requires_grad=True)
        out = tokens
        for block in blocks:
            out = block(out)
        (out[:, 0] * rng.normal(size=dim)).sum().backward()
        per_patch = np.abs(tokens.grad[0, 1:]).sum(axis=1)
        assert np.all(per_patch > 0)

    def test_divided_block_gradient(self):
        """One classification token plus two frames of two patches."""
        rng = np.random.default_rng(1)
        block = DividedSpaceTimeBlock(8, 2, 2, 2, rng)
        tokens = Tensor(rng.normal(size=(2, 1 + 2 * 2, 8)), requires_grad=True)
        weights = rng.normal(size=(2, 5, 8))
        params = {"tokens": tokens, **block.parameters()}
        report = grad_check(lambda: (block(tokens) * weights).sum(), params, h=1e-4, tol=1e-4, max_coords=200)
        assert report.passed, report.summary()

    def test_single_frame_block(self):
        rng = np.random.default_rng(2)
        block = DividedSpaceTimeBlock(8, 2, 1, 4, rng)
        tokens = Tensor(rng.normal(size=(3, 5, 8)), requires_grad=True)
        out = block(tokens)
        assert out.shape == (3, 5, 8)
        out.sum().backward()
        assert np.all(np.isfinite(tokens.grad))

    def test_repeated_memory_token_matches_single_token(self):
        decoder = TransformerDecoder(8, 2, 2, 3, np.random.default_rng(3)).eval()
        token = np.random.default_rng(4).normal(size=(1, 1, 8))
        single = decoder(Tensor(token)).values
        repeated = decoder(Tensor(np.repeat(token, 6, axis=1))).values
        np.testing.assert_allclose(repeated, single, atol=1e-12)

    def test_conv_encoder_maps_zero_to_zero(self):
        cfg = minimal_config("conv_mlp").model_copy(update={"conv_channels": (4, 6)})
        encoder = ConvEncoder(cfg, np.random.default_rng(5))
        for path, tensor in encoder.parameters().items():
            if path.endswith("bias"):
                tensor.assign(np.zeros_like(tensor.values))
        out = encoder(np.zeros((2, cfg.n_frames, 3, cfg.image_size, cfg.image_size)))
        np.testing.assert_array_equal(out.values, np.zeros((2, cfg.embed_dim)))
