"""Clip records, judge aggregation, frame storage, preprocessing and datasets."""

import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, computed_field, model_validator

from diffcore import Tensor
from models import DEFAULT_MEAN_RGB, DataConfig, PreprocessConfig, SamplerConfig
from sampling import plan_frames

logger = logging.getLogger(__name__)

N_JUDGES = 7
N_TRIMMED = 2
JUDGE_MAX = 10.0
JUDGE_STEP = 0.5
# Largest possible sum of the three middle judges.
MAX_MIDDLE_SUM = 3 * JUDGE_MAX

DIFFICULTY_LEVELS = (2.0, 2.5, 3.0, 3.5, 4.1)
MTL_AQA_SPLIT_SIZES = {"train": 1059, "test": 353}

MANIFEST_HEADER = "clip_id\tframes_path\tjudge_scores\tdifficulty\tsplit"
SHARD_FILE = "frames.f32"
SHARD_SHAPE_FILE = "shape.txt"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

RngLike = Union[int, Sequence[int], np.random.Generator, None]


class JudgeScoreError(ValueError):
    """Raised for a judge panel with the wrong size or out-of-range votes."""


class ManifestError(ValueError):
    """Raised for a manifest row that cannot be turned into a clip record."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(prefix + message)


class PreprocessError(ValueError):
    """Raised when frames cannot be resized and cropped as configured."""


def _rng(seed: RngLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def aggregate_judges(judge_scores: Sequence[float]) -> float:
    """Drop the two highest and two lowest votes, sum the rest, scale to [0, 1]."""
    scores = np.asarray(judge_scores, dtype=np.float64)
    if scores.shape != (N_JUDGES,):
        raise JudgeScoreError(f"expected {N_JUDGES} judge scores, got {scores.size}")
    if np.isnan(scores).any() or (scores < 0).any() or (scores > JUDGE_MAX).any():
        raise JudgeScoreError(f"judge scores must lie in [0, {JUDGE_MAX:g}], got {scores.tolist()}")
    middle = np.sort(scores)[N_TRIMMED : N_JUDGES - N_TRIMMED]
    return float(middle.sum() / MAX_MIDDLE_SUM)


def final_score(normalized_score: float, difficulty: float) -> float:
    return normalized_score * difficulty


class ClipRecord(BaseModel):
    """One annotated dive: judge panel, difficulty and where its frames live."""

    clip_id: str = Field(..., min_length=1)
    frame_count: int = Field(..., ge=1)
    frame_source: str
    judge_scores: Tuple[float, ...]
    difficulty: float = Field(..., gt=0)
    split: Literal["train", "test"] = "train"

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def check_judges(self):
        aggregate_judges(self.judge_scores)
        off_grid = [s for s in self.judge_scores if abs(s / JUDGE_STEP - round(s / JUDGE_STEP)) > 1e-9]
        if off_grid:
            raise JudgeScoreError(f"judge scores must be multiples of {JUDGE_STEP}: {off_grid}")
        return self

    @computed_field
    @property
    def normalized_score(self) -> float:
        return aggregate_judges(self.judge_scores)

    @computed_field
    @property
    def final_score(self) -> float:
        return final_score(self.normalized_score, self.difficulty)

    @property
    def target(self) -> Tuple[float, float]:
        """Regression target (normalized score, difficulty)."""
        return self.normalized_score, self.difficulty


class FrameStore(ABC):
    """Random access to the RGB frames of one clip, values in [0, 1]."""

    @property
    @abstractmethod
    def frame_count(self) -> int:
        pass

    @abstractmethod
    def read(self, indices: Sequence[int]) -> np.ndarray:
        """Return frames ``indices`` as float64 [N, H, W, 3]."""


class ArrayFrameStore(FrameStore):
    def __init__(self, frames: np.ndarray):
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"frames must be [T, H, W, 3], got {frames.shape}")
        self.frames = frames

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    def read(self, indices):
        return np.asarray(self.frames[np.asarray(indices)], dtype=np.float64)


class ShardFrameStore(FrameStore):
    """Raw little-endian float32 shard ``frames.f32`` plus ``shape.txt`` ("T H W 3")."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        shape_text = (self.directory / SHARD_SHAPE_FILE).read_text().split()
        self.shape = tuple(int(v) for v in shape_text)
        if len(self.shape) != 4 or self.shape[-1] != 3:
            raise ValueError(f"{self.directory}: bad shard shape {self.shape}")
        self._frames = np.memmap(
            self.directory / SHARD_FILE, dtype="<f4", mode="r", shape=self.shape
        )

    @property
    def frame_count(self) -> int:
        return self.shape[0]

    def read(self, indices):
        return np.asarray(self._frames[np.asarray(indices)], dtype=np.float64)


class ImageFrameStore(FrameStore):
    """A directory of per-frame image files, ordered by file name."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.paths = sorted(
            p for p in self.directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not self.paths:
            raise ValueError(f"{self.directory}: no frame images found")

    @property
    def frame_count(self) -> int:
        return len(self.paths)

    def read(self, indices):
        frames = []
        for i in indices:
            with Image.open(self.paths[int(i)]) as image:
                frames.append(np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0)
        return np.stack(frames)


def write_shard(directory: Union[str, Path], frames: np.ndarray) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(frames, dtype="<f4").tofile(directory / SHARD_FILE)
    (directory / SHARD_SHAPE_FILE).write_text(" ".join(str(d) for d in frames.shape) + "\n")
    return directory


def open_frame_store(path: Union[str, Path]) -> FrameStore:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"frames directory not found: {path}")
    if (path / SHARD_SHAPE_FILE).exists():
        return ShardFrameStore(path)
    return ImageFrameStore(path)


def _resize_short_side(frames: np.ndarray, short_side: int) -> np.ndarray:
    n, h, w, _ = frames.shape
    scale = short_side / min(h, w)
    new_h, new_w = int(round(h * scale)), int(round(w * scale))
    if (new_h, new_w) == (h, w):
        return frames
    out = np.empty((n, new_h, new_w, 3), dtype=np.float64)
    for i in range(n):
        for c in range(3):
            channel = Image.fromarray(np.ascontiguousarray(frames[i, :, :, c], dtype=np.float32))
            out[i, :, :, c] = np.asarray(
                channel.resize((new_w, new_h), Image.Resampling.BILINEAR), dtype=np.float64
            )
    return out


def preprocess(frames: np.ndarray, cfg: PreprocessConfig, rng: RngLike = None) -> Tensor:
    """Resize, crop, flip and standardize one clip's frames into [N, 3, crop, crop].

    With ``cfg.augment`` a single crop window and a single flip decision are
    drawn from ``rng`` and applied to every frame; otherwise the clip is
    center-cropped and never flipped.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise PreprocessError(f"frames must be [N, H, W, 3], got {frames.shape}")
    resized = _resize_short_side(frames, cfg.short_side)
    _, h, w, _ = resized.shape
    if h < cfg.crop or w < cfg.crop:
        raise PreprocessError(f"frame {h}x{w} is smaller than the {cfg.crop} crop after resize")

    if cfg.augment:
        generator = _rng(rng)
        top = int(generator.integers(0, h - cfg.crop + 1))
        left = int(generator.integers(0, w - cfg.crop + 1))
        flip = bool(generator.random() < cfg.hflip_prob)
    else:
        top, left, flip = (h - cfg.crop) // 2, (w - cfg.crop) // 2, False

    clip = resized[:, top : top + cfg.crop, left : left + cfg.crop, :]
    if flip:
        clip = clip[:, :, ::-1, :]
    if cfg.normalize:
        clip = (clip - np.asarray(cfg.mean_rgb)) / np.asarray(cfg.std_rgb)
    return Tensor(np.ascontiguousarray(clip.transpose(0, 3, 1, 2)))


def default_preprocess_config(image_size: int, **overrides) -> PreprocessConfig:
    """Crop to ``image_size`` after resizing the short side by the 256/224 ratio."""
    return PreprocessConfig(short_side=image_size * 8 // 7, crop=image_size, **overrides)


class ClipDataset:
    """Clip records paired with their frame stores."""

    def __init__(self, records: Sequence[ClipRecord], stores: Dict[str, FrameStore]):
        missing = [r.clip_id for r in records if r.clip_id not in stores]
        if missing:
            raise ValueError(f"no frame store for clips: {missing[:5]}")
        self.records: List[ClipRecord] = list(records)
        self.stores = stores

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ClipRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> ClipRecord:
        return self.records[index]

    def split(self, name: str) -> "ClipDataset":
        return ClipDataset([r for r in self.records if r.split == name], self.stores)

    def targets(self) -> np.ndarray:
        """[B, 2] array of (normalized score, difficulty)."""
        return np.array([r.target for r in self.records], dtype=np.float64).reshape(-1, 2)

    def final_scores(self) -> np.ndarray:
        return np.array([r.final_score for r in self.records], dtype=np.float64)

    def read_frames(self, index: int, indices: Sequence[int]) -> np.ndarray:
        record = self.records[index]
        return self.stores[record.clip_id].read(indices)

    def load_clip(
        self,
        index: int,
        sampler_cfg: SamplerConfig,
        preprocess_cfg: PreprocessConfig,
        plan_rng: RngLike = None,
        augment_rng: RngLike = None,
    ) -> np.ndarray:
        """Plan, read and preprocess one clip into a [N, 3, crop, crop] array."""
        plan = plan_frames(self.records[index].frame_count, sampler_cfg, _rng(plan_rng) if plan_rng is not None else None)
        frames = self.read_frames(index, plan.indices)
        return preprocess(frames, preprocess_cfg, augment_rng).values

    def load_batch(
        self,
        indices: Sequence[int],
        sampler_cfg: SamplerConfig,
        preprocess_cfg: PreprocessConfig,
        seed_fn=None,
    ) -> np.ndarray:
        """Stack clips; ``seed_fn(index)`` returns a (plan seed, augment seed) pair per clip."""
        clips = []
        for index in indices:
            plan_seed, augment_seed = seed_fn(index) if seed_fn else (None, None)
            clips.append(self.load_clip(index, sampler_cfg, preprocess_cfg, plan_seed, augment_seed))
        return np.stack(clips)


def _synth_judges(half_points: int, rng: np.random.Generator) -> Tuple[float, ...]:
    """Seven half-step votes whose trimmed middle three sum to ``half_points / 2``."""
    base, extra = divmod(half_points, 3)
    middle = [base + (1 if i < extra else 0) for i in range(3)]
    top = int(2 * JUDGE_MAX)
    highs = rng.integers(max(middle), top + 1, size=N_TRIMMED)
    lows = rng.integers(0, min(middle) + 1, size=N_TRIMMED)
    votes = np.concatenate([middle, highs, lows]).astype(np.float64) * JUDGE_STEP
    rng.shuffle(votes)
    return tuple(float(v) for v in votes)


def _render_clip(
    t: int, height: int, width: int, jitter: float, difficulty: float, rng: np.random.Generator
) -> np.ndarray:
    """A bright blob sliding along a straight path, shaken by ``jitter``.

    Blob radius and brightness grow with the difficulty level.
    """
    side = min(height, width)
    start = rng.uniform(0.2, 0.8, size=2) * (height, width)
    end = rng.uniform(0.2, 0.8, size=2) * (height, width)
    progress = np.linspace(0.0, 1.0, t)[:, None]
    path = start + progress * (end - start)
    path += jitter * 0.25 * side * rng.standard_normal((t, 2))

    radius = side * (0.06 + 0.03 * difficulty)
    brightness = 0.25 + 0.15 * difficulty
    ys, xs = np.mgrid[0:height, 0:width]
    dist2 = (ys[None] - path[:, 0, None, None]) ** 2 + (xs[None] - path[:, 1, None, None]) ** 2
    blob = brightness * np.exp(-dist2 / (2.0 * radius**2))

    background = np.asarray(DEFAULT_MEAN_RGB) + 0.02 * rng.standard_normal((t, height, width, 3))
    return np.clip(background + blob[..., None], 0.0, 1.0)


def synth_dataset(
    n_clips: int,
    t: int,
    height: int,
    width: int,
    rng_seed: int = 0,
    test_fraction: float = 0.2,
) -> ClipDataset:
    """Procedural clips with a known score.

    Each clip draws a trimmed judge sum of k half-points, k uniform in
    [12, 60]; its normalized score is s = k / 60 and the blob's trajectory
    jitter is a = (1 - s) / 0.8, i.e. s = 1 - 0.8 * a: smoother paths score
    higher. Difficulty is drawn from DIFFICULTY_LEVELS. Clip ``i`` only
    depends on ``(rng_seed, i)``.
    """
    if n_clips < 0 or t < 1 or height < 1 or width < 1:
        raise ValueError("n_clips must be >= 0 and t, height, width positive")
    n_test = int(round(n_clips * test_fraction))
    test_ids = set(np.random.default_rng([rng_seed, n_clips]).permutation(n_clips)[:n_test].tolist())

    records, stores = [], {}
    for i in range(n_clips):
        rng = np.random.default_rng([rng_seed, i])
        half_points = int(rng.integers(12, 61))
        score = half_points / 60.0
        jitter = (1.0 - score) / 0.8
        difficulty = float(rng.choice(DIFFICULTY_LEVELS))
        clip_id = f"synth-{rng_seed}-{i:05d}"
        stores[clip_id] = ArrayFrameStore(_render_clip(t, height, width, jitter, difficulty, rng))
        records.append(
            ClipRecord(
                clip_id=clip_id,
                frame_count=t,
                frame_source=f"synthetic:{rng_seed}:{i}",
                judge_scores=_synth_judges(half_points, rng),
                difficulty=difficulty,
                split="test" if i in test_ids else "train",
            )
        )
    logger.info(
        f"Generated {n_clips} synthetic clips ({n_test} test)",
        extra={"seed": rng_seed, "frames": t, "size": (height, width)},
    )
    return ClipDataset(records, stores)


def write_synthetic_dataset(directory: Union[str, Path], dataset: ClipDataset) -> Path:
    """Write each clip as a float32 shard plus a manifest; returns the manifest path."""
    directory = Path(directory)
    lines = [MANIFEST_HEADER]
    for record in dataset.records:
        relative = Path("clips") / record.clip_id
        store = dataset.stores[record.clip_id]
        write_shard(directory / relative, store.read(range(store.frame_count)))
        judges = ",".join(f"{s:g}" for s in record.judge_scores)
        lines.append(f"{record.clip_id}\t{relative.as_posix()}\t{judges}\t{record.difficulty:g}\t{record.split}")
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(dataset)} clips to {directory}")
    return manifest


def _parse_row(line: str, line_number: int, base: Path) -> Tuple[ClipRecord, FrameStore]:
    fields = line.split("\t")
    if len(fields) != 5:
        raise ManifestError(f"expected 5 tab-separated fields, got {len(fields)}", line_number)
    clip_id, frames_path, judges_text, difficulty_text, split = (f.strip() for f in fields)
    try:
        judges = tuple(float(v) for v in judges_text.split(","))
        difficulty = float(difficulty_text)
    except ValueError as e:
        raise ManifestError(f"clip {clip_id!r}: {e}", line_number) from e
    if len(judges) != N_JUDGES:
        raise ManifestError(
            f"clip {clip_id!r}: expected {N_JUDGES} judge scores, got {len(judges)}", line_number
        )
    frames_dir = Path(frames_path)
    if not frames_dir.is_absolute():
        frames_dir = base / frames_dir
    try:
        store = open_frame_store(frames_dir)
    except (OSError, ValueError) as e:
        raise ManifestError(f"clip {clip_id!r}: {e}", line_number) from e
    try:
        record = ClipRecord(
            clip_id=clip_id,
            frame_count=store.frame_count,
            frame_source=str(frames_dir),
            judge_scores=judges,
            difficulty=difficulty,
            split=split,
        )
    except (ValidationError, JudgeScoreError) as e:
        raise ManifestError(f"clip {clip_id!r}: {e}", line_number) from e
    return record, store


def load_manifest_dataset(path: Union[str, Path]) -> ClipDataset:
    """Parse a manifest and open every clip's frames.

    Rows are ``clip_id<TAB>frames_path<TAB>j1,...,j7<TAB>difficulty<TAB>split``;
    relative frame paths resolve against the manifest's directory. An optional
    header row and ``#`` comment lines are skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records, stores = [], {}
    for line_number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#") or line == MANIFEST_HEADER:
            continue
        record, store = _parse_row(line, line_number, path.parent)
        if record.clip_id in stores:
            raise ManifestError(f"duplicate clip id {record.clip_id!r}", line_number)
        records.append(record)
        stores[record.clip_id] = store
    counts = {name: sum(r.split == name for r in records) for name in ("train", "test")}
    logger.info(f"Loaded {len(records)} clips from {path}", extra={"splits": counts})
    return ClipDataset(records, stores)


def load_manifest(path: Union[str, Path]) -> List[ClipRecord]:
    return load_manifest_dataset(path).records


def build_dataset(cfg: DataConfig) -> ClipDataset:
    if cfg.source == "manifest":
        return load_manifest_dataset(cfg.manifest)
    return synth_dataset(
        cfg.n_clips, cfg.frame_count, cfg.height, cfg.width, cfg.seed, cfg.test_fraction
    )
