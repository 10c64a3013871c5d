"""Frame accuracy, segmental edit score, F1@k and confusion matrices."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .data import Segment, SegmentLabeling
from .errors import ConsistencyError, DomainError

OVERLAPS = (0.10, 0.25, 0.50)


def _as_labeling(x) -> SegmentLabeling:
    return x if isinstance(x, SegmentLabeling) else SegmentLabeling.from_framewise(x)


def _segments(x) -> tuple:
    """Segments of a labeling, frame-wise array or raw (action, start, length) list.

    Raw lists are not checked for distinct neighbours, so over-segmented
    predictions (two adjacent segments of one class) can be scored.
    """
    if isinstance(x, SegmentLabeling):
        return x.segments
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], (Segment, tuple)):
        return tuple(s if isinstance(s, Segment) else Segment(*map(int, s)) for s in x)
    return SegmentLabeling.from_framewise(x).segments


def frame_accuracy(pred, gt) -> float:
    p, g = _as_labeling(pred).framewise, _as_labeling(gt).framewise
    if p.shape != g.shape:
        raise ConsistencyError(f"prediction has {p.size} frames, ground truth {g.size}")
    if g.size == 0:
        return 100.0
    return 100.0 * float(np.mean(p == g))


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance, two-row dynamic programme."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def edit_score(pred, gt) -> float:
    p, g = [s.action for s in _segments(pred)], [s.action for s in _segments(gt)]
    longest = max(len(p), len(g))
    if longest == 0:
        return 100.0
    return 100.0 * (1.0 - levenshtein(p, g) / longest)


@dataclass
class SegmentMatch:
    threshold: float
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        if denom == 0:
            return 100.0
        return 100.0 * 2 * self.tp / denom

    def __iadd__(self, other: "SegmentMatch") -> "SegmentMatch":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


def segment_iou(a, b) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / (max(a.end, b.end) - min(a.start, b.start))


def match_segments(pred, gt, k: float) -> SegmentMatch:
    if not 0 < k < 1:
        raise DomainError(f"overlap threshold must be in (0, 1), got {k}")
    gt_segs = list(_segments(gt))
    used = [False] * len(gt_segs)
    m = SegmentMatch(k)
    for ps in _segments(pred):
        best, best_j = 0.0, -1
        for j, gs in enumerate(gt_segs):
            if used[j] or gs.action != ps.action:
                continue
            iou = segment_iou(ps, gs)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= k:
            m.tp += 1
            used[best_j] = True
        else:
            m.fp += 1
    m.fn = len(gt_segs) - m.tp
    return m


def f1_at(pred, gt, k: float) -> tuple[float, SegmentMatch]:
    m = match_segments(pred, gt, k)
    return m.f1(), m


@dataclass
class TaskMetrics:
    acc: float
    edit: float
    f1_10: float
    f1_25: float
    f1_50: float

    def values(self) -> list[float]:
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


HEADER = ["Acc", "Edit", "F1@10", "F1@25", "F1@50"]


def evaluate_pairs(pairs: Iterable[tuple[SegmentLabeling, SegmentLabeling]]) -> TaskMetrics:
    """Metrics over a set of (pred, gt) videos.

    Accuracy pools frames, edit is the mean over videos and F1 uses tp/fp/fn
    summed over videos.
    """
    correct = total = 0
    edits = []
    matches = [SegmentMatch(k) for k in OVERLAPS]
    for pred, gt in pairs:
        p, g = _as_labeling(pred), _as_labeling(gt)
        if p.num_frames != g.num_frames:
            raise ConsistencyError(f"prediction has {p.num_frames} frames, ground truth {g.num_frames}")
        correct += int(np.sum(p.framewise == g.framewise))
        total += g.num_frames
        edits.append(edit_score(p, g))
        for m in matches:
            m += match_segments(p, g, m.threshold)
    acc = 100.0 * correct / total if total else 100.0
    edit = float(np.mean(edits)) if edits else 100.0
    return TaskMetrics(acc, edit, *(m.f1() for m in matches))


def aggregate(reports: Sequence[TaskMetrics]) -> TaskMetrics:
    """Unweighted mean over tasks."""
    if not reports:
        raise DomainError("cannot aggregate zero task reports")
    return TaskMetrics(*np.mean([r.values() for r in reports], axis=0).tolist())


def confusion_accumulate(matrix: np.ndarray, pred, gt) -> np.ndarray:
    """Add per-frame counts into ``matrix[gt][pred]`` (in place) and return it."""
    p, g = _as_labeling(pred).framewise, _as_labeling(gt).framewise
    if p.shape != g.shape:
        raise ConsistencyError(f"prediction has {p.size} frames, ground truth {g.size}")
    np.add.at(matrix, (g, p), 1)
    return matrix


def normalize_rows(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised matrix plus a mask of rows without any ground-truth frames."""
    sums = matrix.sum(axis=1, keepdims=True).astype(np.float64)
    empty = sums[:, 0] == 0
    out = np.divide(matrix, sums, out=np.zeros(matrix.shape), where=sums > 0)
    return out, empty


@dataclass
class MetricsReport:
    per_task: dict[int, TaskMetrics]
    confusion: np.ndarray | None = None
    aggregate: TaskMetrics = field(init=False)

    def __post_init__(self):
        self.aggregate = aggregate([self.per_task[b] for b in sorted(self.per_task)])

    def table(self, sep: str = "\t") -> str:
        lines = [sep.join(["task", *HEADER])]
        for b in sorted(self.per_task):
            lines.append(sep.join([str(b), *(f"{v:.4f}" for v in self.per_task[b].values())]))
        lines.append(sep.join(["aggregate", *(f"{v:.4f}" for v in self.aggregate.values())]))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "per_task": {str(b): asdict(m) for b, m in sorted(self.per_task.items())},
            "aggregate": asdict(self.aggregate),
        }


def confusion_text(matrix: np.ndarray, names: Sequence[str]) -> str:
    """Row-normalised confusion grid with a header row of class names.

    Rows without ground-truth frames are printed as ``nan`` (flagged empty).
    """
    norm, empty = normalize_rows(matrix)
    lines = ["\t".join(["gt\\pred", *names])]
    for i, name in enumerate(names):
        cells = ["nan"] * len(names) if empty[i] else [f"{v:.4f}" for v in norm[i]]
        lines.append("\t".join([name, *cells]))
    return "\n".join(lines) + "\n"
