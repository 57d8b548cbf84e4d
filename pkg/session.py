"""Training log and on-disk training sessions (checkpoint + resume state)."""

import csv
import json
import logging
import math
import os
import shutil
from dataclasses import astuple, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

from checkpoint import load_checkpoint, save_checkpoint
from networks import AQAModel, load_model, save_model
from optim import AdamW
from utils import atomic_write

logger = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "train_loss", "train_spearman", "eval_spearman", "wall_time_s")
LOG_FILE = "train_log.csv"
OPTIMIZER_FILE = "optimizer.ckpt"
STATE_FILE = "train_state.json"
STAGING_DIR = ".staging"


@dataclass(frozen=True)
class LogRow:
    epoch: int
    train_loss: float
    train_spearman: float
    eval_spearman: float
    wall_time_s: float


@dataclass
class TrainLog:
    """Per-epoch metrics, strictly increasing in epoch."""

    rows: List[LogRow] = field(default_factory=list)

    def append(self, row: LogRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError(f"epoch {row.epoch} does not follow {self.rows[-1].epoch}")
        values = astuple(row)[1:]
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite metric in epoch {row.epoch}: {values}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def deterministic_rows(self) -> List[Tuple[int, float, float, float]]:
        """Rows without the wall-clock column."""
        return [astuple(row)[:4] for row in self.rows]

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with atomic_write(path, newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(LOG_HEADER)
            for row in self.rows:
                writer.writerow([row.epoch, repr(row.train_loss), repr(row.train_spearman),
                                 repr(row.eval_spearman), repr(row.wall_time_s)])
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "TrainLog":
        with Path(path).open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if tuple(header or ()) != LOG_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            log = cls()
            for record in reader:
                log.append(LogRow(int(record[0]), *(float(v) for v in record[1:])))
        return log


@dataclass
class ResumeState:
    model: AQAModel
    optimizer_arrays: dict
    epochs_done: int
    best_eval: Optional[float]
    log: TrainLog


class TrainSession:
    """Directory holding everything needed to continue a run.

    Layout: ``model.ckpt`` + ``model.json`` (weights and config),
    ``optimizer.ckpt`` (AdamW moments), ``train_state.json`` (epochs done,
    best eval score) and ``train_log.csv``.
    """

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def save(
        self,
        model: AQAModel,
        optimizer: AdamW,
        epochs_done: int,
        log: TrainLog,
        best_eval: Optional[float] = None,
    ) -> Path:
        """Write the session into a staging directory, then move each file into place.

        A save that fails while writing leaves the previous session untouched.
        """
        staging = self.directory / STAGING_DIR
        if staging.exists():
            shutil.rmtree(staging)
        try:
            save_model(model, staging)
            save_checkpoint(staging / OPTIMIZER_FILE, optimizer.state_arrays())
            log.to_csv(staging / LOG_FILE)
            with atomic_write(staging / STATE_FILE, encoding="utf-8") as handle:
                json.dump({"epochs_done": epochs_done, "best_eval": best_eval}, handle, indent=2)
        except BaseException:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        # state file last: a session is resumable only once it is in place
        for path in sorted(staging.iterdir(), key=lambda p: p.name == STATE_FILE):
            os.replace(path, self.directory / path.name)
        staging.rmdir()
        logger.debug(f"Saved training session at epoch {epochs_done} to {self.directory}")
        return self.directory

    def exists(self) -> bool:
        return (self.directory / STATE_FILE).exists()

    def restore(self) -> ResumeState:
        if not self.exists():
            raise FileNotFoundError(f"no training session in {self.directory}")
        state = json.loads((self.directory / STATE_FILE).read_text(encoding="utf-8"))
        log_path = self.directory / LOG_FILE
        return ResumeState(
            model=load_model(self.directory),
            optimizer_arrays=load_checkpoint(self.directory / OPTIMIZER_FILE),
            epochs_done=int(state["epochs_done"]),
            best_eval=state.get("best_eval"),
            log=TrainLog.from_csv(log_path) if log_path.exists() else TrainLog(),
        )
