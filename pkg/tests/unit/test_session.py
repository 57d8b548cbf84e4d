"""Tests for the training log and session directories."""

import numpy as np
import pytest

import session as session_module
from networks import ArchitectureFactory
from optim import AdamW
from session import LOG_FILE, LOG_HEADER, STATE_FILE, LogRow, TrainLog, TrainSession


def _row(epoch, loss=0.5):
    return LogRow(epoch=epoch, train_loss=loss, train_spearman=0.1, eval_spearman=0.2, wall_time_s=1.5)


class TestTrainLog:
    def test_epochs_must_increase(self):
        log = TrainLog()
        log.append(_row(1))
        with pytest.raises(ValueError, match="does not follow"):
            log.append(_row(1))

    def test_non_finite_metric_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            TrainLog().append(_row(1, loss=float("nan")))

    def test_csv_round_trip_is_exact(self, tmp_path):
        log = TrainLog()
        log.append(_row(1, loss=0.1 + 0.2))
        log.append(_row(2, loss=1 / 3))
        restored = TrainLog.from_csv(log.to_csv(tmp_path / LOG_FILE))
        assert restored.rows == log.rows

    def test_csv_header(self, tmp_path):
        path = TrainLog().to_csv(tmp_path / LOG_FILE)
        assert path.read_text(encoding="utf-8").splitlines()[0] == ",".join(LOG_HEADER)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / LOG_FILE
        path.write_text("epoch,loss\n1,0.5\n", encoding="utf-8")
        with pytest.raises(ValueError, match="unexpected header"):
            TrainLog.from_csv(path)

    def test_deterministic_rows_drop_wall_time(self):
        log = TrainLog()
        log.append(_row(3))
        assert log.deterministic_rows() == [(3, 0.5, 0.1, 0.2)]


class TestTrainSession:
    def test_save_and_restore(self, tmp_path, tiny_model_config):
        model = ArchitectureFactory.create(tiny_model_config, seed=2)
        optimizer = AdamW(model.parameters(), lr=1e-3, weight_decay=0.0)
        for tensor in model.parameters().values():
            tensor.grad = np.ones_like(tensor.values)
        optimizer.step()
        log = TrainLog()
        log.append(_row(1))

        session = TrainSession(tmp_path / "run")
        assert not session.exists()
        session.save(model, optimizer, epochs_done=1, log=log, best_eval=0.25)
        assert session.exists()

        resumed = session.restore()
        assert resumed.epochs_done == 1
        assert resumed.best_eval == 0.25
        assert resumed.log.rows == log.rows
        for path, values in model.state_dict().items():
            np.testing.assert_array_equal(resumed.model.state_dict()[path], values)
        for key, values in optimizer.state_arrays().items():
            np.testing.assert_array_equal(resumed.optimizer_arrays[key], values)

    def test_failed_save_keeps_previous_session(self, tmp_path, tiny_model_config, monkeypatch):
        model = ArchitectureFactory.create(tiny_model_config, seed=2)
        optimizer = AdamW(model.parameters(), lr=1e-3, weight_decay=0.0)
        log = TrainLog()
        log.append(_row(1))
        session = TrainSession(tmp_path / "run")
        session.save(model, optimizer, epochs_done=1, log=log, best_eval=0.25)
        saved = sorted(p.name for p in session.directory.iterdir())

        def interrupted(*args, **kwargs):
            raise OSError("interrupted")

        monkeypatch.setattr(session_module.json, "dump", interrupted)
        log.append(_row(2))
        with pytest.raises(OSError, match="interrupted"):
            session.save(model, optimizer, epochs_done=2, log=log, best_eval=0.5)
        monkeypatch.undo()

        assert sorted(p.name for p in session.directory.iterdir()) == saved
        resumed = session.restore()
        assert resumed.epochs_done == 1
        assert resumed.best_eval == 0.25
        assert resumed.log.rows == [_row(1)]

    def test_save_leaves_no_staging_files(self, tmp_path, tiny_model_config):
        model = ArchitectureFactory.create(tiny_model_config)
        optimizer = AdamW(model.parameters(), lr=1e-3, weight_decay=0.0)
        session = TrainSession(tmp_path / "run")
        for epoch in (1, 2):
            session.save(model, optimizer, epochs_done=epoch, log=TrainLog())
        names = {p.name for p in session.directory.iterdir()}
        assert not any(name.startswith(".") for name in names)
        assert {LOG_FILE, STATE_FILE} <= names

    def test_restore_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            TrainSession(tmp_path / "nothing").restore()
