"""Feature/label containers, on-disk file formats and a synthetic corpus.

Frame indices are 0-based in memory. Files and user-facing listings use
1-based starts; :meth:`SegmentLabeling.external` does the conversion.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ConsistencyError, FormatError, LabelingError, LabelSpaceError
from .numeric import RandomSource

FSEQ_MAGIC = b"FSQ1"
_HEADER = struct.Struct("<4sII")


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class Segment:
    action: int
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length


class SegmentLabeling:
    """Ordered, contiguous, non-overlapping action segments of one video."""

    __slots__ = ("segments", "_frames")

    def __init__(self, segments: Iterable[Segment | tuple[int, int, int]]):
        segs = tuple(s if isinstance(s, Segment) else Segment(*map(int, s)) for s in segments)
        expected = 0
        for i, s in enumerate(segs):
            if s.length < 1:
                raise LabelingError(f"segment {i} has length {s.length}")
            if s.start != expected:
                raise LabelingError(f"segment {i} starts at {s.start}, expected {expected}")
            if i and segs[i - 1].action == s.action:
                raise LabelingError(f"segments {i - 1} and {i} share action {s.action}")
            expected = s.end
        self.segments = segs
        self._frames = None

    @classmethod
    def from_framewise(cls, labels: Sequence[int] | np.ndarray) -> "SegmentLabeling":
        y = np.asarray(labels, dtype=np.int64)
        if y.ndim != 1:
            raise LabelingError(f"frame-wise labels must be 1-D, got shape {y.shape}")
        if y.size == 0:
            return cls(())
        cuts = np.flatnonzero(y[1:] != y[:-1]) + 1
        starts = np.concatenate(([0], cuts))
        ends = np.concatenate((cuts, [y.size]))
        return cls(Segment(int(y[s]), int(s), int(e - s)) for s, e in zip(starts, ends))

    @property
    def framewise(self) -> np.ndarray:
        if self._frames is None:
            out = np.empty(self.num_frames, dtype=np.int64)
            for s in self.segments:
                out[s.start : s.end] = s.action
            out.setflags(write=False)
            self._frames = out
        return self._frames

    @property
    def num_frames(self) -> int:
        return self.segments[-1].end if self.segments else 0

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.segments]

    def external(self) -> list[tuple[int, int, int]]:
        """Segments as (action, 1-based start, length)."""
        return [(s.action, s.start + 1, s.length) for s in self.segments]

    def relabel(self, mapping: dict[int, int]) -> "SegmentLabeling":
        return SegmentLabeling.from_framewise(np.array([mapping[a] for a in self.framewise], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.segments)

    def __eq__(self, other) -> bool:
        return isinstance(other, SegmentLabeling) and self.segments == other.segments

    def __hash__(self) -> int:
        return hash(self.segments)

    def __repr__(self) -> str:
        return f"SegmentLabeling({self.external()})"


@dataclass
class FeatureSequence:
    values: np.ndarray
    source: str = ""
    fps: float = 15.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise FormatError(f"feature matrix must be T x D with T, D >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise FormatError(f"non-finite feature values in {self.source or 'sequence'}")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class Item:
    features: FeatureSequence
    labels: SegmentLabeling

    def __post_init__(self):
        if self.labels.num_frames != self.features.num_frames:
            raise ConsistencyError(
                f"{self.features.source}: {self.labels.num_frames} labels for "
                f"{self.features.num_frames} frames"
            )


@dataclass
class TaskDataset:
    task: int
    classes: frozenset[int]
    train: list[Item]
    test: list[Item]
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.classes = frozenset(self.classes)
        for split in (self.train, self.test):
            for item in split:
                extra = set(item.labels.actions) - self.classes
                if extra:
                    raise LabelingError(
                        f"task {self.task}: {item.features.source} uses classes {sorted(extra)} "
                        f"outside the task label set"
                    )


class LabelSpace:
    """Global table (task, local action name) -> class id."""

    def __init__(self, mode: str, table: dict[tuple[int, str], int]):
        if mode not in ("disjoint", "blurry"):
            raise ConfigError(f"label-space mode must be disjoint or blurry, got {mode!r}")
        self.mode = mode
        self.table = dict(table)
        if mode == "disjoint" and len(set(self.table.values())) != len(self.table):
            raise LabelSpaceError("disjoint label space maps two (task, name) pairs to one id")
        self.num_classes = max(self.table.values()) + 1 if self.table else 0

    def lookup(self, task: int, name: str) -> int:
        try:
            return self.table[(task, name)]
        except KeyError:
            raise LabelingError(f"unknown action name {name!r} for task {task}") from None

    def classes_of(self, task: int) -> frozenset[int]:
        return frozenset(i for (b, _), i in self.table.items() if b == task)

    def tasks(self) -> list[int]:
        return sorted({b for b, _ in self.table})

    def name_of(self, class_id: int) -> str:
        names = sorted({n for (_, n), i in self.table.items() if i == class_id})
        return names[0] if len(names) == 1 else "|".join(names)

    def class_names(self) -> list[str]:
        return [self.name_of(i) for i in range(self.num_classes)]

    def mapping_lines(self) -> list[str]:
        """Mapping-file lines. Disjoint names are task-qualified as ``<task>:<name>``."""
        lines = []
        for cid in range(self.num_classes):
            keys = sorted(k for k, i in self.table.items() if i == cid)
            if self.mode == "blurry":
                lines.append(f"{cid} {keys[0][1]}")
            else:
                b, name = keys[0]
                lines.append(f"{cid} {b}:{name}")
        return lines

    @classmethod
    def from_mapping(cls, lines: Iterable[str], tasks: dict[int, set[str]], mode: str) -> "LabelSpace":
        """Build from mapping lines plus the local names each task uses.

        A qualified entry ``<task>:<name>`` binds only to that task; a bare name
        binds to every task that uses it.
        """
        qualified: dict[tuple[int, str], int] = {}
        bare: dict[str, int] = {}
        for n, raw in enumerate(lines, 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(maxsplit=1)
            if len(parts) != 2 or not parts[0].isdigit():
                raise FormatError(f"mapping line {n}: expected '<id> <name>', got {raw!r}")
            cid, name = int(parts[0]), parts[1].strip()
            head, sep, tail = name.partition(":")
            if sep and head.isdigit():
                qualified[(int(head), tail)] = cid
            else:
                bare[name] = cid
        table = {}
        for b, names in tasks.items():
            for name in names:
                if (b, name) in qualified:
                    table[(b, name)] = qualified[(b, name)]
                elif name in bare:
                    table[(b, name)] = bare[name]
                else:
                    raise LabelingError(f"unknown action name {name!r} for task {b}")
        return cls(mode, table)


# ---------------------------------------------------------------------------
# FSEQ1 features


def encode_features(seq: FeatureSequence) -> bytes:
    T, D = seq.values.shape
    return _HEADER.pack(FSEQ_MAGIC, T, D) + seq.values.astype("<f4").tobytes(order="C")


def decode_features(buf: bytes, source: str = "") -> FeatureSequence:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: truncated header at byte {len(buf)}")
    magic, T, D = _HEADER.unpack_from(buf, 0)
    if magic != FSEQ_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at byte 0")
    if T < 1 or D < 1:
        raise FormatError(f"{source}: invalid shape T={T} D={D} at byte 4")
    need = _HEADER.size + 4 * T * D
    if len(buf) < need:
        raise FormatError(f"{source}: truncated payload, expected {need} bytes, file ends at byte {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"{source}: {len(buf) - need} trailing bytes after byte {need}")
    values = np.frombuffer(buf, dtype="<f4", count=T * D, offset=_HEADER.size).reshape(T, D)
    bad = np.flatnonzero(~np.isfinite(values.ravel()))
    if bad.size:
        raise FormatError(f"{source}: non-finite value at byte {_HEADER.size + 4 * int(bad[0])}")
    return FeatureSequence(values.astype(np.float64), source=source)


def load_features(path: str | os.PathLike) -> FeatureSequence:
    path = Path(path)
    return decode_features(path.read_bytes(), source=str(path))


def write_features(path: str | os.PathLike, seq: FeatureSequence) -> None:
    Path(path).write_bytes(encode_features(seq))


# ---------------------------------------------------------------------------
# label files


def read_label_names(path: str | os.PathLike) -> list[str]:
    path = Path(path)
    names = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        tok = line.strip()
        if not tok or len(tok.split()) != 1:
            raise FormatError(f"{path}:{n}: expected one action name, got {line!r}")
        names.append(tok)
    return names


def load_labels(
    path: str | os.PathLike, space: LabelSpace, task: int, num_frames: int | None = None
) -> SegmentLabeling:
    names = read_label_names(path)
    if num_frames is not None and len(names) != num_frames:
        raise ConsistencyError(f"{path}: {len(names)} label lines for {num_frames} feature frames")
    return SegmentLabeling.from_framewise([space.lookup(task, n) for n in names])


def write_labels(path: str | os.PathLike, labels: SegmentLabeling, names: dict[int, str]) -> None:
    Path(path).write_text("".join(f"{names[a]}\n" for a in labels.framewise), encoding="utf-8")


# ---------------------------------------------------------------------------
# manifests and dataset directories


def read_manifest(path: str | os.PathLike) -> list[tuple[int, Path, Path]]:
    path = Path(path)
    entries = []
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, sep, rest = line.partition(":")
        parts = rest.split()
        words = head.split()
        if not sep or len(words) != 2 or words[0] != "task" or not words[1].isdigit() or len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected 'task <b>: <feature path> <label path>'")
        feat, lab = (Path(p) if os.path.isabs(p) else path.parent / p for p in parts)
        entries.append((int(words[1]), feat, lab))
    return entries


def write_manifest(path: str | os.PathLike, entries: Iterable[tuple[int, str, str]]) -> None:
    Path(path).write_text("".join(f"task {b}: {f} {l}\n" for b, f, l in entries), encoding="utf-8")


def load_dataset_dir(root: str | os.PathLike, mode: str = "disjoint") -> tuple[list[TaskDataset], LabelSpace]:
    """Load ``manifest_train.txt``/``manifest_test.txt`` + ``mapping.txt`` from ``root``."""
    root = Path(root)
    splits = {}
    for split in ("train", "test"):
        mpath = root / f"manifest_{split}.txt"
        if not mpath.exists():
            raise FormatError(f"missing manifest {mpath}")
        splits[split] = read_manifest(mpath)
    used: dict[int, set[str]] = {}
    raw_names: dict[Path, list[str]] = {}
    for entries in splits.values():
        for b, _, lab in entries:
            raw_names[lab] = read_label_names(lab)
            used.setdefault(b, set()).update(raw_names[lab])
    mapping = (root / "mapping.txt").read_text(encoding="utf-8").splitlines()
    space = LabelSpace.from_mapping(mapping, used, mode)
    datasets = []
    for b in sorted(used):
        items = {}
        for split, entries in splits.items():
            items[split] = []
            for tb, feat, lab in entries:
                if tb != b:
                    continue
                fs = load_features(feat)
                names = raw_names[lab]
                if len(names) != fs.num_frames:
                    raise ConsistencyError(f"{lab}: {len(names)} label lines for {fs.num_frames} feature frames")
                labels = SegmentLabeling.from_framewise([space.lookup(b, n) for n in names])
                items[split].append(Item(fs, labels))
        names = {space.lookup(b, n): n for n in used[b]}
        datasets.append(TaskDataset(b, space.classes_of(b), items["train"], items["test"], names))
    return datasets, space


def write_dataset_dir(root: str | os.PathLike, datasets: Sequence[TaskDataset], space: LabelSpace) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    manifests: dict[str, list] = {"train": [], "test": []}
    for ds in datasets:
        for split in ("train", "test"):
            for k, item in enumerate(getattr(ds, split)):
                stem = f"task{ds.task:02d}_{split}_{k:03d}"
                write_features(root / "features" / f"{stem}.fseq", item.features)
                write_labels(root / "labels" / f"{stem}.txt", item.labels, ds.names)
                manifests[split].append((ds.task, f"features/{stem}.fseq", f"labels/{stem}.txt"))
    for split, entries in manifests.items():
        write_manifest(root / f"manifest_{split}.txt", entries)
    (root / "mapping.txt").write_text("".join(f"{l}\n" for l in space.mapping_lines()), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic procedural corpus


@dataclass
class SynthSpec:
    tasks: int = 3
    actions_per_task: int = 4
    videos_per_task: int = 25
    dim: int = 16
    seg_min: int = 8
    seg_max: int = 20
    segs_min: int = 4
    segs_max: int = 7
    noise: float = 0.3
    drift: float = 1.0
    base: float = 1.0
    context: float = 0.0
    shared_fraction: float = 0.0
    train_fraction: float = 0.8

    def validate(self) -> None:
        counts = ("tasks", "actions_per_task", "videos_per_task", "dim", "seg_min", "segs_min")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be >= 1")
        if self.seg_max < self.seg_min or self.segs_max < self.segs_min:
            raise ConfigError("synth length ranges must satisfy min <= max")
        if min(self.noise, self.drift, self.base, self.context) < 0:
            raise ConfigError("synth scales must be >= 0")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ConfigError("synth.shared_fraction must be in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0 and self.videos_per_task > 1:
            raise ConfigError("synth.train_fraction must be in (0, 1)")
        if self.actions_per_task < 2 and self.segs_max > 1:
            raise ConfigError("multi-segment videos need at least 2 actions per task")


@dataclass
class ActionPrototype:
    base: np.ndarray
    drift: np.ndarray


def coherence_ramp(length: int) -> np.ndarray:
    """Coherence of every frame in a segment: 0 .. 1 in equal steps (0 for length 1)."""
    if length < 1:
        raise LabelingError(f"segment length must be >= 1, got {length}")
    if length == 1:
        return np.zeros(1)
    return np.arange(length) / (length - 1)


def make_synthetic_corpus(
    spec: SynthSpec, rng: RandomSource
) -> tuple[list[TaskDataset], LabelSpace, dict[str, ActionPrototype]]:
    """Procedural corpus whose frames drift linearly within each segment.

    Frame ``i`` of a segment of action ``a`` with length ``l`` is
    ``base_a + c_i * drift_a + context_v + noise`` where ``c_i`` is the
    relative progression ``(i-1)/(l-1)`` and ``context_v`` is a per-video
    offset. Returns the tasks under a disjoint label space, the label space
    and the per-name prototypes.
    """
    spec.validate()
    n_shared = int(round(spec.shared_fraction * spec.actions_per_task))
    vocab_rng = rng.child("vocab")
    shared_pool = [f"shared{k}" for k in range(spec.actions_per_task)]
    task_names: dict[int, list[str]] = {}
    for b in range(1, spec.tasks + 1):
        picked = sorted(vocab_rng.permutation(len(shared_pool))[:n_shared].tolist())
        names = [shared_pool[k] for k in picked]
        names += [f"t{b}a{k}" for k in range(spec.actions_per_task - n_shared)]
        task_names[b] = names

    proto_rng = rng.child("prototypes")
    protos: dict[str, ActionPrototype] = {}
    for name in shared_pool + [n for b in sorted(task_names) for n in task_names[b] if n not in shared_pool]:
        protos[name] = ActionPrototype(
            proto_rng.normal(spec.dim, spec.base), proto_rng.normal(spec.dim, spec.drift)
        )

    table: dict[tuple[int, str], int] = {}
    for b in sorted(task_names):
        for name in task_names[b]:
            table[(b, name)] = len(table)
    space = LabelSpace("disjoint", table)

    datasets = []
    for b in sorted(task_names):
        trng = rng.child("task", b)
        names = task_names[b]
        k = len(names)
        # Markov ordering: a fixed per-task transition matrix without self loops
        trans = trng.gen.dirichlet(np.full(k, 0.5), size=k)
        np.fill_diagonal(trans, 0.0)
        trans /= trans.sum(axis=1, keepdims=True)
        start_p = trng.gen.dirichlet(np.full(k, 0.5))
        items = []
        for v in range(spec.videos_per_task):
            vrng = trng.child("video", v)
            n_segs = int(vrng.integers(spec.segs_min, spec.segs_max + 1)) if k > 1 else 1
            order = [int(vrng.gen.choice(k, p=start_p))]
            while len(order) < n_segs:
                order.append(int(vrng.gen.choice(k, p=trans[order[-1]])))
            context = vrng.normal(spec.dim, spec.context) if spec.context > 0 else np.zeros(spec.dim)
            frames, segs, t = [], [], 0
            for local in order:
                name = names[local]
                length = int(vrng.integers(spec.seg_min, spec.seg_max + 1))
                c = coherence_ramp(length)[:, None]
                p = protos[name]
                x = p.base + c * p.drift + context
                if spec.noise > 0:
                    x = x + vrng.normal((length, spec.dim), spec.noise)
                frames.append(x)
                segs.append(Segment(table[(b, name)], t, length))
                t += length
            fs = FeatureSequence(np.concatenate(frames), source=f"synth/task{b}/video{v}")
            items.append(Item(fs, SegmentLabeling(segs)))
        n_train = spec.videos_per_task if spec.videos_per_task == 1 else max(
            1, min(spec.videos_per_task - 1, int(round(spec.train_fraction * spec.videos_per_task)))
        )
        datasets.append(
            TaskDataset(
                b,
                space.classes_of(b),
                items[:n_train],
                items[n_train:],
                {table[(b, n)]: n for n in names},
            )
        )
    return datasets, space, protos


def split_blurry(
    datasets: Sequence[TaskDataset], names: dict[int, str] | None = None
) -> tuple[list[TaskDataset], LabelSpace]:
    """Collapse identically named actions across tasks onto one global id."""
    if names is None:
        names = {cid: n for ds in datasets for cid, n in ds.names.items()}
    new_ids: dict[str, int] = {}
    table: dict[tuple[int, str], int] = {}
    remap: dict[int, int] = {}
    for ds in sorted(datasets, key=lambda d: d.task):
        for cid in sorted(ds.classes):
            name = names[cid]
            new_ids.setdefault(name, len(new_ids))
            remap[cid] = new_ids[name]
            table[(ds.task, name)] = new_ids[name]
    out = []
    for ds in datasets:
        def conv(items):
            return [Item(it.features, it.labels.relabel(remap)) for it in items]

        out.append(
            TaskDataset(
                ds.task,
                {remap[c] for c in ds.classes},
                conv(ds.train),
                conv(ds.test),
                {remap[c]: names[c] for c in ds.classes},
            )
        )
    return out, LabelSpace("blurry", table)


def ceil_count(ratio: float, n: int) -> int:
    return max(1, math.ceil(ratio * n - 1e-12))
