"""Seeded synthetic tasks separating text-only, image-only and cross-modal skill.

Vocabulary layout (fixed, vocab_size 64):

    0-9    DIGIT_0..DIGIT_9
    10     PLUS
    11     PAD
    12     ANSWER_SLOT
    13     Q_SHAPEOF
    14     Q_MAJORITY
    15-22  COLOR_0..COLOR_7
    23-30  SHAPE_0..SHAPE_7
    31-63  reserved

Image patches are ``onehot8(color) ++ onehot8(shape)`` plus N(0, 0.05) noise.
Every example is a pure function of its integer seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .modality import Modality

GENERATOR_VERSION = 1

VOCAB_SIZE = 64
PLUS, PAD, ANSWER_SLOT, Q_SHAPEOF, Q_MAJORITY = 10, 11, 12, 13, 14
COLOR_BASE, SHAPE_BASE = 15, 23
N_COLORS = N_SHAPES = 8
N_PATCHES = 16
PATCH_DIM = N_COLORS + N_SHAPES
NOISE_STD = 0.05
MAX_TRIES = 100
# image-only examples plant one colour this many times so the majority is learnable
MAJORITY_COUNT = (6, 10)


def digit(i: int) -> int:
    return i


def color(i: int) -> int:
    return COLOR_BASE + i


def shape(i: int) -> int:
    return SHAPE_BASE + i


class Task(str, Enum):
    CROSS = "cross_modal"
    TEXT = "text_only"
    IMAGE = "image_only"


TASK_ORDER = (Task.CROSS, Task.TEXT, Task.IMAGE)
DEFAULT_MIX = (0.4, 0.3, 0.3)


@dataclass
class SyntheticExample:
    task: Task
    seed: int
    patch_features: np.ndarray  # [m, PATCH_DIM]
    patch_attrs: list[tuple[int, int]]
    text_ids: list[int]
    answer_id: int

    @property
    def m(self) -> int:
        return len(self.patch_attrs)

    @property
    def n(self) -> int:
        return len(self.text_ids)

    @property
    def answer_position(self) -> int:
        """Sequence index of the ANSWER_SLOT token (image tokens come first)."""
        return self.m + self.text_ids.index(ANSWER_SLOT)

    def record(self) -> dict:
        return {
            "version": GENERATOR_VERSION,
            "task": self.task.value,
            "seed": self.seed,
            "patch_attrs": [list(a) for a in self.patch_attrs],
            "text_ids": list(self.text_ids),
            "answer": self.answer_id,
        }


def _patches(rng: np.random.Generator, colors: np.ndarray, shapes: np.ndarray) -> np.ndarray:
    feats = np.zeros((len(colors), PATCH_DIM))
    feats[np.arange(len(colors)), colors] = 1.0
    feats[np.arange(len(colors)), N_COLORS + shapes] = 1.0
    return feats + rng.normal(0.0, NOISE_STD, feats.shape)


def gen_cross_modal_example(seed: int) -> SyntheticExample:
    """Ask for the shape of the single patch carrying the queried colour."""
    rng = np.random.default_rng(seed)
    for _ in range(MAX_TRIES):
        colors = rng.integers(0, N_COLORS, N_PATCHES)
        shapes = rng.integers(0, N_SHAPES, N_PATCHES)
        query = int(rng.integers(0, N_COLORS))
        hits = np.flatnonzero(colors == query)
        if hits.size == 1:
            break
    else:
        raise RuntimeError(f"seed {seed}: no unique queried colour after {MAX_TRIES} draws")
    answer = shape(int(shapes[hits[0]]))
    return SyntheticExample(
        Task.CROSS, seed, _patches(rng, colors, shapes),
        [(int(c), int(s)) for c, s in zip(colors, shapes)],
        [Q_SHAPEOF, color(query), ANSWER_SLOT], answer,
    )


def gen_text_only_example(seed: int) -> SyntheticExample:
    rng = np.random.default_rng(seed)
    a, b = (int(v) for v in rng.integers(0, 10, 2))
    return SyntheticExample(
        Task.TEXT, seed, np.zeros((0, PATCH_DIM)), [],
        [digit(a), digit(b), PLUS, ANSWER_SLOT], digit((a + b) % 10),
    )


def majority_color(colors: Sequence[int]) -> int:
    counts = np.bincount(np.asarray(colors, dtype=int), minlength=N_COLORS)
    return int(np.argmax(counts))  # argmax returns the first maximum


def gen_image_only_example(seed: int) -> SyntheticExample:
    rng = np.random.default_rng(seed)
    dominant = int(rng.integers(0, N_COLORS))
    planted = int(rng.integers(*MAJORITY_COUNT))
    others = rng.integers(0, N_COLORS - 1, N_PATCHES - planted)
    others = others + (others >= dominant)
    colors = rng.permutation(np.concatenate([np.full(planted, dominant), others]))
    shapes = rng.integers(0, N_SHAPES, N_PATCHES)
    return SyntheticExample(
        Task.IMAGE, seed, _patches(rng, colors, shapes),
        [(int(c), int(s)) for c, s in zip(colors, shapes)],
        [Q_MAJORITY, ANSWER_SLOT], color(majority_color(colors)),
    )


GENERATORS = {
    Task.CROSS: gen_cross_modal_example,
    Task.TEXT: gen_text_only_example,
    Task.IMAGE: gen_image_only_example,
}


def regenerate(record: dict) -> SyntheticExample:
    if record.get("version") != GENERATOR_VERSION:
        raise ValueError(f"record from generator version {record.get('version')}, have {GENERATOR_VERSION}")
    ex = GENERATORS[Task(record["task"])](int(record["seed"]))
    if ex.record() != record:
        raise ValueError(f"record for seed {record['seed']} does not match its regeneration")
    return ex


@dataclass
class Batch:
    """Right-padded batch; flat row indices address the ``[B * S]`` token grid."""

    size: int
    seq_len: int
    tags: np.ndarray  # [B, S] Modality values
    token_ids: np.ndarray  # [B, S]; PAD at image and padding positions
    patch_features: np.ndarray  # [sum m, PATCH_DIM]
    image_rows: np.ndarray
    text_rows: np.ndarray  # text and pad rows
    answer_rows: np.ndarray  # [B]
    answer_ids: np.ndarray  # [B]
    tasks: list[Task]

    @property
    def positions(self) -> np.ndarray:
        return np.tile(np.arange(self.seq_len), self.size)


def collate(examples: Sequence[SyntheticExample], dtype=np.float64) -> Batch:
    if not examples:
        raise ValueError("cannot collate an empty batch")
    seq_len = max(ex.m + ex.n for ex in examples)
    b = len(examples)
    tags = np.full((b, seq_len), Modality.PAD, dtype=np.int8)
    ids = np.full((b, seq_len), PAD, dtype=np.int64)
    feats, answer_rows = [], []
    for i, ex in enumerate(examples):
        tags[i, :ex.m] = Modality.IMAGE
        tags[i, ex.m:ex.m + ex.n] = Modality.TEXT
        ids[i, ex.m:ex.m + ex.n] = ex.text_ids
        feats.append(ex.patch_features)
        answer_rows.append(i * seq_len + ex.answer_position)
    flat = tags.ravel()
    return Batch(
        size=b,
        seq_len=seq_len,
        tags=tags,
        token_ids=ids,
        patch_features=np.concatenate(feats).astype(dtype),
        image_rows=np.flatnonzero(flat == Modality.IMAGE),
        text_rows=np.flatnonzero(flat != Modality.IMAGE),
        answer_rows=np.asarray(answer_rows, dtype=np.int64),
        answer_ids=np.asarray([ex.answer_id for ex in examples], dtype=np.int64),
        tasks=[ex.task for ex in examples],
    )


class Dataset:
    def __init__(self, examples: list[SyntheticExample], seed: int = 0):
        if not examples:
            raise ValueError("dataset is empty")
        self.examples = examples
        self.seed = seed

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int) -> SyntheticExample:
        return self.examples[i]

    def task_counts(self) -> dict[Task, int]:
        return {t: sum(ex.task == t for ex in self.examples) for t in TASK_ORDER}

    def by_task(self, task: Task) -> "Dataset":
        return Dataset([ex for ex in self.examples if ex.task == task], self.seed)

    def iter_batches(self, batch_size: int, dtype=np.float64) -> Iterator[Batch]:
        """One ordered pass, last batch possibly short."""
        for start in range(0, len(self), batch_size):
            yield collate(self.examples[start:start + batch_size], dtype)

    def stream(self, batch_size: int, dtype=np.float64) -> Iterator[Batch]:
        """Endless batches; each epoch is a fresh seeded shuffle, short tails dropped."""
        epoch = 0
        n = len(self)
        if batch_size > n:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
        while True:
            order = np.random.default_rng([self.seed, epoch]).permutation(n)
            for start in range(0, n - batch_size + 1, batch_size):
                yield collate([self.examples[i] for i in order[start:start + batch_size]], dtype)
            epoch += 1

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for ex in self.examples:
                fh.write(json.dumps(ex.record(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, seed: int = 0) -> "Dataset":
        with open(path) as fh:
            return cls([regenerate(json.loads(line)) for line in fh if line.strip()], seed)


def default_sizes(total: int) -> tuple[int, int, int]:
    cross = int(round(total * DEFAULT_MIX[0]))
    text = int(round(total * DEFAULT_MIX[1]))
    return cross, text, total - cross - text


def make_dataset(sizes: Sequence[int] = (4000, 3000, 3000), seed: int = 0) -> Dataset:
    """Build ``sizes = (cross, text, image)`` examples in seeded shuffled order."""
    sizes = [int(s) for s in sizes]
    if len(sizes) != 3 or min(sizes) < 0:
        raise ValueError(f"need three non-negative task sizes, got {sizes}")
    if sum(sizes) == 0:
        raise ValueError("dataset would be empty")
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**62, size=sum(sizes))
    tasks = [t for t, n in zip(TASK_ORDER, sizes) for _ in range(n)]
    order = rng.permutation(len(tasks))
    examples = [GENERATORS[tasks[i]](int(seeds[i])) for i in order]
    return Dataset(examples, seed)


def save_dataset_dir(out: Path, train: Dataset, evaluation: Dataset) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train.save(out / "train.jsonl")
    evaluation.save(out / "eval.jsonl")


def load_dataset_dir(path: Path, split: str = "eval", seed: int = 0) -> Dataset:
    path = Path(path)
    target = path / f"{split}.jsonl" if path.is_dir() else path
    if not target.exists():
        raise FileNotFoundError(f"dataset file {target} not found")
    return Dataset.load(target, seed)
