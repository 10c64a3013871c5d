"""Replay video synthesis and the exemplar / original replay baselines.

Generation is top-down: a symbolic structure (ordered action segments with
durations) is drawn uniformly from a task's sequence pool, then each
segment's frames are produced by that task's cached decoder and the
segments are concatenated in time order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import FeatureSequence, Item, SegmentLabeling, TaskDataset, coherence_ramp, write_features, write_labels
from .errors import BudgetError, CacheError, ConfigError, FormatError, PoolError
from .numeric import RandomSource
from .tca import TcaModel

MODES = ("coherent", "static", "random")
STATIC_COHERENCE = 0.5


@dataclass(frozen=True)
class SequencePool:
    task: int
    structures: tuple[SegmentLabeling, ...]

    def __len__(self) -> int:
        return len(self.structures)

    def lines(self) -> list[str]:
        return [" ".join(f"{a},{t},{l}" for a, t, l in s.external()) for s in self.structures]

    @classmethod
    def from_lines(cls, task: int, lines) -> "SequencePool":
        structs = []
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                segs = [tuple(int(v) for v in tok.split(",")) for tok in line.split()]
                structs.append(SegmentLabeling((a, t - 1, l) for a, t, l in segs))
            except ValueError as exc:
                raise FormatError(f"pool line {n}: {exc}") from None
        return cls(task, tuple(structs))


@dataclass
class ReplayVideo:
    features: FeatureSequence
    labels: SegmentLabeling
    source_task: int
    index: int
    mode: str

    def as_item(self) -> Item:
        return Item(self.features, self.labels)


def build_pool(task: TaskDataset) -> SequencePool:
    if not task.train:
        raise PoolError(f"task {task.task} has no training items")
    return SequencePool(task.task, tuple(item.labels for item in task.train))


def sample_structure(pool: SequencePool, rng: RandomSource) -> tuple[int, SegmentLabeling]:
    """Uniform draw (with replacement across calls); returns (index, structure)."""
    if len(pool) == 0:
        raise PoolError(f"sequence pool of task {pool.task} is empty")
    i = int(rng.integers(0, len(pool)))
    return i, pool.structures[i]


def generate_segment(decoder: TcaModel, action: int, length: int, mode: str, rng: RandomSource) -> np.ndarray:
    if length < 1:
        raise ConfigError(f"segment length must be >= 1, got {length}")
    Z = decoder.latent_dim
    if mode == "coherent":
        z = rng.normal((1, Z))
        c = coherence_ramp(length)
    elif mode == "static":
        z = rng.normal((1, Z))
        c = np.full(length, STATIC_COHERENCE)
    elif mode == "random":
        z = rng.normal((length, Z))
        c = np.full(length, STATIC_COHERENCE)
    else:
        raise ConfigError(f"unknown generation mode {mode!r}; expected one of {MODES}")
    return decoder.decode(z, np.full(length, action), c)


def generate_video(
    decoders: Mapping[int, TcaModel],
    pool: SequencePool,
    mode: str,
    rng: RandomSource,
) -> ReplayVideo:
    if pool.task not in decoders:
        raise CacheError(f"no cached decoder for task {pool.task}")
    decoder = decoders[pool.task]
    idx, struct = sample_structure(pool, rng.child("structure"))
    parts = [
        generate_segment(decoder, s.action, s.length, mode, rng.child("segment", n))
        for n, s in enumerate(struct.segments)
    ]
    fs = FeatureSequence(np.concatenate(parts), source=f"replay/task{pool.task}/{mode}/{idx}")
    return ReplayVideo(fs, struct, pool.task, idx, mode)


def allocate_budget(M: int, tasks: Sequence[int]) -> dict[int, int]:
    """Split ``M`` videos over ``tasks``: equal shares, remainder to the lowest ids."""
    n = len(tasks)
    if n == 0:
        return {}
    if M < n:
        raise BudgetError(f"replay budget {M} is smaller than the {n} previous tasks")
    base, extra = divmod(M, n)
    return {b: base + (1 if r < extra else 0) for r, b in enumerate(sorted(tasks))}


def build_replay_set(
    decoders: Mapping[int, TcaModel],
    pools: Mapping[int, SequencePool],
    M: int,
    mode: str,
    rng: RandomSource,
) -> list[ReplayVideo]:
    videos = []
    for b, count in allocate_budget(M, list(pools)).items():
        if b not in decoders:
            raise CacheError(f"no cached decoder for task {b}")
        for i in range(count):
            videos.append(generate_video(decoders, pools[b], mode, rng.child(b, i)))
    return videos


# ---------------------------------------------------------------------------
# baselines


@dataclass(frozen=True)
class ExemplarStore:
    """One mean frame per segment per training sequence, plus the structures."""

    task: int
    structures: tuple[SegmentLabeling, ...]
    means: tuple[np.ndarray, ...]

    @classmethod
    def from_task(cls, task: TaskDataset) -> "ExemplarStore":
        if not task.train:
            raise PoolError(f"task {task.task} has no training items")
        means = tuple(
            np.stack([item.features.values[s.start : s.end].mean(axis=0) for s in item.labels.segments])
            for item in task.train
        )
        return cls(task.task, tuple(item.labels for item in task.train), means)

    def inflate(self, i: int) -> np.ndarray:
        lengths = [s.length for s in self.structures[i].segments]
        return np.repeat(self.means[i], lengths, axis=0)


def build_exemplar_set(stores: Mapping[int, ExemplarStore], M: int, rng: RandomSource) -> list[ReplayVideo]:
    videos = []
    for b, count in allocate_budget(M, list(stores)).items():
        store = stores[b]
        for i in range(count):
            k = int(rng.child(b, i).integers(0, len(store.structures)))
            fs = FeatureSequence(store.inflate(k), source=f"exemplar/task{b}/{k}")
            videos.append(ReplayVideo(fs, store.structures[k], b, k, "exemplar"))
    return videos


def original_replay(retained: Mapping[int, Sequence[Item]], M: int, rng: RandomSource) -> list[ReplayVideo]:
    videos = []
    for b, count in allocate_budget(M, list(retained)).items():
        items = retained[b]
        if not items:
            raise PoolError(f"no retained items for task {b}")
        for i in range(count):
            k = int(rng.child(b, i).integers(0, len(items)))
            videos.append(ReplayVideo(items[k].features, items[k].labels, b, k, "original"))
    return videos


def dump_replay(videos: Sequence[ReplayVideo], root: str | Path, names: Mapping[int, str]) -> list[Path]:
    """Write videos as FSEQ1 + label files under ``root/<mode>/task<b>/``."""
    written = []
    for n, v in enumerate(videos):
        d = Path(root) / v.mode / f"task{v.source_task:02d}"
        d.mkdir(parents=True, exist_ok=True)
        stem = f"replay{n:04d}_struct{v.index:03d}"
        write_features(d / f"{stem}.fseq", v.features)
        write_labels(d / f"{stem}.txt", v.labels, names)
        written.append(d / f"{stem}.fseq")
    return written
