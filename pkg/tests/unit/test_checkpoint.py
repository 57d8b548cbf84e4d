"""Tests for the binary checkpoint format."""

import numpy as np
import pytest

from checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint


class TestCheckpoint:
    def test_round_trip_keeps_order_shapes_and_bits(self, tmp_path, rng):
        arrays = {
            "encoder.proj.weight": rng.normal(size=(3, 4)),
            "step": np.array(7.0),
            "head.layers.0.bias": rng.normal(size=5),
            "empty": np.zeros((0, 2)),
        }
        loaded = load_checkpoint(save_checkpoint(tmp_path / "a.ckpt", arrays))
        assert list(loaded) == list(arrays)
        for name, array in arrays.items():
            assert loaded[name].shape == array.shape
            np.testing.assert_array_equal(loaded[name], array)

    def test_header_is_readable_text(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.ckpt", {"w": np.ones((2, 3)), "s": np.array(1.0)})
        header = path.read_bytes().split(b"END\n")[0].decode("utf-8")
        assert header.splitlines() == [MAGIC, "w 2,3", "s -"]

    def test_whitespace_in_path_rejected(self, tmp_path):
        with pytest.raises(CheckpointError, match="whitespace"):
            save_checkpoint(tmp_path / "a.ckpt", {"bad name": np.ones(1)})

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.ckpt"
        path.write_text("SOMETHING ELSE\nEND\n")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_missing_end_marker(self, tmp_path):
        path = tmp_path / "a.ckpt"
        path.write_text(f"{MAGIC}\nw 2\n")
        with pytest.raises(CheckpointError, match="END"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.ckpt", {"w": np.ones(4)})
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_value_count_mismatch(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.ckpt", {"w": np.ones(4)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="header declares 4"):
            load_checkpoint(path)

    def test_bad_shape_text(self, tmp_path):
        path = tmp_path / "a.ckpt"
        path.write_bytes(f"{MAGIC}\nw two\nEND\n".encode("utf-8"))
        with pytest.raises(CheckpointError, match="bad shape"):
            load_checkpoint(path)
