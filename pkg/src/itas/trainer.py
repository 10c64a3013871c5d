"""Incremental training loop over a sequence of tasks with optional replay.

Strategies:

* ``finetune`` trains on the current task only.
* ``exemplar`` replays per-segment mean frames inflated to segment length.
* ``tca`` replays videos synthesised by per-task cached TCA decoders.
* ``original`` replays retained real training videos (upper bound).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Item, LabelSpace, TaskDataset
from .errors import BudgetError, ConfigError, DataError, NumericError
from .metrics import HEADER, MetricsReport, TaskMetrics, confusion_accumulate, confusion_text, evaluate_pairs
from .numeric import Adam, RandomSource
from .replay import (
    MODES,
    ExemplarStore,
    ReplayVideo,
    SequencePool,
    build_exemplar_set,
    build_pool,
    build_replay_set,
    original_replay,
)
from .segmodel import SegModel, TasLossConfig, loss_tas, predict
from .tca import TcaModel, train_tca

log = logging.getLogger(__name__)

STRATEGIES = ("finetune", "exemplar", "tca", "original")


@dataclass
class SegConfig:
    layers: int = 8
    channels: int = 64
    epochs: int = 30
    lr: float = 5e-4
    smoothing: float = 0.15
    tau: float = 4.0

    def loss(self) -> TasLossConfig:
        return TasLossConfig(self.smoothing, self.tau)


@dataclass
class TcaConfig:
    latent: int = 16
    hidden: int = 64
    epochs: int = 200
    lr: float = 1e-3
    ratio: float = 1.0
    beta: float = 1.0
    batch: int = 64


@dataclass
class IncrementalRun:
    strategy: str = "tca"
    mode: str = "coherent"
    replay_size: int = 60
    task_order: list[int] | None = None
    seed: int = 0
    seg: SegConfig = field(default_factory=SegConfig)
    tca: TcaConfig = field(default_factory=TcaConfig)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown generation mode {self.mode!r}; expected one of {MODES}")
        if self.replay_size < 0:
            raise ConfigError("replay size must be >= 0")


class DataAccessAudit:
    """Hands out training data and records every access.

    Once a task is closed, any further request for its training items is
    logged as a violation (and still served, so the audit can be inspected).
    """

    def __init__(self, datasets: Sequence[TaskDataset]):
        self._tasks = {d.task: d for d in datasets}
        self.closed: set[int] = set()
        self.log: list[tuple[int, int]] = []
        self.violations: list[tuple[int, int]] = []
        self.stage = 0

    def train_items(self, task: int) -> list[Item]:
        self.log.append((self.stage, task))
        if task in self.closed:
            self.violations.append((self.stage, task))
        return list(self._tasks[task].train)

    def test_items(self, task: int) -> list[Item]:
        return self._tasks[task].test

    def close(self, task: int) -> None:
        self.closed.add(task)


@dataclass
class StageRecord:
    stage: int
    task: int
    metrics: dict[int, TaskMetrics]
    confusion: np.ndarray
    replay_count: int
    losses: list[float]


@dataclass
class RunResult:
    model: SegModel
    order: list[int]
    history: list[StageRecord]
    decoders: dict[int, TcaModel]
    pools: dict[int, SequencePool]
    audit: DataAccessAudit

    def final(self) -> MetricsReport:
        last = self.history[-1]
        return MetricsReport(dict(last.metrics), last.confusion)

    def acc_matrix(self) -> np.ndarray:
        """``out[s, j]`` = Acc on the j-th task of the order after stage s+1 (nan if unseen)."""
        B = len(self.order)
        out = np.full((B, B), np.nan)
        for s, rec in enumerate(self.history):
            for j, b in enumerate(self.order[: s + 1]):
                out[s, j] = rec.metrics[b].acc
        return out

    def history_table(self) -> str:
        cols = [f"task{b}" for b in self.order]
        lines = ["# cell = " + "/".join(HEADER), "\t".join(["stage", *cols])]
        for rec in self.history:
            cells = []
            for b in self.order:
                m = rec.metrics.get(b)
                cells.append("-" if m is None else "/".join(f"{v:.4f}" for v in m.values()))
            lines.append("\t".join([str(rec.stage), *cells]))
        return "\n".join(lines) + "\n"


def train_stage(
    model: SegModel,
    real: Sequence[Item],
    replay: Sequence[ReplayVideo | Item],
    epochs: int,
    lr: float,
    loss_cfg: TasLossConfig,
    rng: RandomSource,
) -> list[float]:
    """Per-sequence Adam steps on the shuffled union of real and replay videos."""
    data = []
    for it in list(real) + list(replay):
        data.append((it.features.values, model.columns(it.labels.framewise)))
    if not data:
        raise DataError("nothing to train on")
    opt = Adam(model.parameters(), lr=lr)
    history = []
    for epoch in range(epochs):
        total = 0.0
        for i in rng.child("epoch", epoch).permutation(len(data)):
            x, y = data[i]
            model.zero_grad()
            logits, cache = model._forward(x)
            value, grad = loss_tas(logits, y, loss_cfg)
            if not np.isfinite(value):
                raise NumericError(f"non-finite segmentation loss at epoch {epoch}")
            model.backward(cache, grad)
            opt.step()
            total += value
        history.append(total / len(data))
    return history


def expand_head(model: SegModel, new_classes: Sequence[int], mode: str) -> list[int]:
    return model.expand_head(sorted(new_classes), mode)


def snapshot_eval(
    model: SegModel, tests: Mapping[int, Sequence[Item]], num_classes: int
) -> tuple[dict[int, TaskMetrics], np.ndarray]:
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    metrics = {}
    for b, items in tests.items():
        pairs = []
        for it in items:
            pred = predict(model, it.features)
            confusion_accumulate(confusion, pred, it.labels)
            pairs.append((pred, it.labels))
        metrics[b] = evaluate_pairs(pairs)
    return metrics, confusion


def run(
    cfg: IncrementalRun,
    datasets: Sequence[TaskDataset],
    space: LabelSpace,
    checkpoint_dir: str | Path | None = None,
    on_stage: Callable[[StageRecord], None] | None = None,
) -> RunResult:
    cfg.validate()
    if not datasets:
        raise DataError("no tasks to train on")
    by_task = {d.task: d for d in datasets}
    order = list(cfg.task_order) if cfg.task_order else sorted(by_task)
    if sorted(order) != sorted(by_task):
        raise ConfigError(f"task order {order} is not a permutation of tasks {sorted(by_task)}")
    dims = {it.features.dim for d in datasets for it in d.train + d.test}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dims {sorted(dims)}")
    D = dims.pop()
    if cfg.strategy != "finetune" and 0 < cfg.replay_size < len(order) - 1:
        raise BudgetError(f"replay budget {cfg.replay_size} cannot cover {len(order) - 1} previous tasks")

    root = RandomSource(cfg.seed)
    init_rng, train_rng = root.child("init"), root.child("training")
    replay_rng, tca_rng = root.child("replay"), root.child("tca")
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    audit = DataAccessAudit(datasets)
    model = SegModel(D, sorted(by_task[order[0]].classes), cfg.seg.layers, cfg.seg.channels, init_rng.child("seg"))
    decoders: dict[int, TcaModel] = {}
    pools: dict[int, SequencePool] = {}
    exemplars: dict[int, ExemplarStore] = {}
    retained: dict[int, list[Item]] = {}
    history: list[StageRecord] = []

    for stage, b in enumerate(order, 1):
        audit.stage = stage
        ds = by_task[b]
        if stage > 1:
            expand_head(model, ds.classes, space.mode)

        replay: list[ReplayVideo] = []
        if stage > 1 and cfg.strategy != "finetune" and cfg.replay_size > 0:
            rrng = replay_rng.child(stage)
            if cfg.strategy == "tca":
                replay = build_replay_set(decoders, pools, cfg.replay_size, cfg.mode, rrng)
            elif cfg.strategy == "exemplar":
                replay = build_exemplar_set(exemplars, cfg.replay_size, rrng)
            else:
                replay = original_replay(retained, cfg.replay_size, rrng)

        real = audit.train_items(b)
        losses = train_stage(model, real, replay, cfg.seg.epochs, cfg.seg.lr, cfg.seg.loss(), train_rng.child(stage))

        current = TaskDataset(b, ds.classes, real, [], ds.names)
        if cfg.strategy == "tca":
            tca = TcaModel(D, sorted(ds.classes), cfg.tca.latent, cfg.tca.hidden, init_rng.child("tca", b))
            train_tca(tca, current, cfg.tca.ratio, cfg.tca.epochs, cfg.tca.lr, tca_rng.child(b), cfg.tca.beta, cfg.tca.batch)
            decoders[b] = tca
            pools[b] = build_pool(current)
        elif cfg.strategy == "exemplar":
            exemplars[b] = ExemplarStore.from_task(current)
        elif cfg.strategy == "original":
            retained[b] = list(real)
        audit.close(b)

        tests = {tb: audit.test_items(tb) for tb in order[:stage]}
        metrics, confusion = snapshot_eval(model, tests, space.num_classes)
        rec = StageRecord(stage, b, metrics, confusion, len(replay), losses)
        history.append(rec)
        log.info(
            "stage %d (task %d): replay=%d loss=%.4f avg acc=%.2f",
            stage, b, len(replay), losses[-1] if losses else float("nan"),
            float(np.mean([m.acc for m in metrics.values()])),
        )
        if ckpt is not None:
            model.save(ckpt / f"seg_stage{stage:02d}.ckpt")
            if b in decoders:
                decoders[b].save(ckpt / f"tca_task{b:02d}.ckpt")
                (ckpt / f"pool_task{b:02d}.txt").write_text("\n".join(pools[b].lines()) + "\n", encoding="utf-8")
        if on_stage is not None:
            on_stage(rec)

    return RunResult(model, order, history, decoders, pools, audit)


def write_run_outputs(result: RunResult, out: str | Path, space: LabelSpace) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics_history.tsv").write_text(result.history_table(), encoding="utf-8")
    (out / "metrics_final.tsv").write_text(result.final().table(), encoding="utf-8")
    names = space.class_names()
    for rec in result.history:
        (out / f"confusion_stage{rec.stage:02d}.tsv").write_text(confusion_text(rec.confusion, names), encoding="utf-8")
