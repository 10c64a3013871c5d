"""``itas`` command-line front end.

Subcommands: synth, run, sweep, eval, gradcheck, dump-replay. Every
command resolves a :class:`RunConfig` (defaults < --config < --set < flags)
and is deterministic given that configuration.
"""

from __future__ import annotations

import argparse
import copy
import logging
import re
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .checks import check_seg, check_tca
from .config import RunConfig, default_out_root, load_config
from .data import (
    LabelSpace,
    SegmentLabeling,
    load_dataset_dir,
    make_synthetic_corpus,
    read_label_names,
    split_blurry,
    write_dataset_dir,
)
from .errors import ConfigError, ItasError, LabelingError, NumericError, PairingError, RunDirError
from .metrics import HEADER, MetricsReport, evaluate_pairs
from .numeric import RandomSource
from .replay import MODES, SequencePool, build_replay_set, dump_replay
from .tca import TcaModel
from .trainer import run, write_run_outputs

log = logging.getLogger("itas")

SWEEP_AXES = ("M", "ratio", "seed")


# ---------------------------------------------------------------------------
# helpers


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.set or ())
    if args.seed is not None:
        cfg.run.seed = cfg.data.seed = args.seed
    if args.out is not None:
        cfg.run.out = args.out
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig, default_name: str) -> Path:
    return Path(cfg.run.out) if cfg.run.out else default_out_root() / default_name


def _claim(path: Path, force: bool) -> Path:
    """Create ``path``; refuse a non-empty existing directory unless forced."""
    if path.exists():
        if not path.is_dir():
            raise RunDirError(f"{path} exists and is not a directory")
        if any(path.iterdir()) and not force:
            raise RunDirError(f"{path} already exists; pass --force to overwrite")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RunDirError(f"cannot create {path}: {exc.strerror}") from None
    return path


def load_corpus(cfg: RunConfig):
    """Datasets and label space from ``data.path`` or the synthetic spec."""
    if cfg.data.path:
        return load_dataset_dir(cfg.data.path, cfg.data.mode)
    datasets, space, _ = make_synthetic_corpus(cfg.synth, RandomSource(cfg.data.seed).child("corpus"))
    if cfg.data.mode == "blurry":
        datasets, space = split_blurry(datasets)
    return datasets, space


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def snapshot(cfg: RunConfig) -> str:
    """Resolved config minus the output location, which does not affect results."""
    frozen = copy.deepcopy(cfg)
    frozen.run.out = ""
    return frozen.to_text()


def execute_run(cfg: RunConfig, out: Path, datasets=None, space=None):
    """One incremental run written into ``out`` (which must already exist)."""
    if datasets is None:
        datasets, space = load_corpus(cfg)
    _write_text(out / "config.txt", snapshot(cfg))
    _write_text(out / "mapping.txt", "".join(f"{l}\n" for l in space.mapping_lines()))
    result = run(cfg.incremental(), datasets, space, checkpoint_dir=out / "checkpoints")
    write_run_outputs(result, out, space)
    return result


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    if cfg.data.path:
        raise ConfigError("synth writes a synthetic corpus; unset data.path")
    out = _claim(_out_dir(cfg, f"synth-seed{cfg.data.seed}"), args.force)
    datasets, space = load_corpus(cfg)
    write_dataset_dir(out, datasets, space)
    _write_text(out / "config.txt", snapshot(cfg))
    print(f"wrote {len(datasets)} tasks to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _resolve(args)
    out = _claim(_out_dir(cfg, f"run-{cfg.run.strategy}-seed{cfg.run.seed}"), args.force)
    result = execute_run(cfg, out)
    sys.stdout.write(result.final().table())
    print(f"run directory: {out}")
    return 0


def _sweep_value(axis: str, raw: str):
    try:
        if axis == "ratio":
            v = float(raw)
            return v / 100.0 if v > 1 else v
        return int(raw)
    except ValueError:
        raise ConfigError(f"bad {axis} sweep value {raw!r}") from None


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    values = [_sweep_value(args.axis, v) for v in args.values.replace(",", " ").split()]
    if len(values) < 2:
        raise ConfigError("a sweep needs at least 2 values")
    out = _claim(_out_dir(cfg, f"sweep-{args.axis}"), args.force)
    datasets, space = load_corpus(cfg)
    tasks = sorted(d.task for d in datasets)
    rows, curves = [], []
    for v in values:
        child = copy.deepcopy(cfg)
        if args.axis == "M":
            child.run.replay_size = v
        elif args.axis == "ratio":
            child.tca.ratio = v
        else:
            child.run.seed = v
            perm = RandomSource(v).child("order").permutation(len(tasks))
            child.run.task_order = ",".join(str(tasks[i]) for i in perm)
        child.validate()
        cdir = _claim(out / f"{args.axis}_{v}", args.force)
        result = execute_run(child, cdir, datasets, space)
        agg = result.final().aggregate
        rows.append((v, agg))
        curves.append([float(np.nanmean(r)) for r in result.acc_matrix()])
        log.info("sweep %s=%s: Acc %.2f", args.axis, v, agg.acc)
    lines = ["\t".join([args.axis, *HEADER])]
    lines += ["\t".join([str(v), *(f"{x:.4f}" for x in agg.values())]) for v, agg in rows]
    summary = "\n".join(lines) + "\n"
    _write_text(out / "summary.tsv", summary)
    sys.stdout.write(summary)
    if args.axis == "seed":
        c = np.array(curves)
        text = "stage\tmean_acc\tstd_acc\n" + "".join(
            f"{s + 1}\t{m:.4f}\t{d:.4f}\n" for s, (m, d) in enumerate(zip(c.mean(0), c.std(0)))
        )
        _write_text(out / "curves.tsv", text)
    return 0


_TASK_TAG = re.compile(r"task(\d+)")


def _task_of(rel: Path) -> int:
    for part in (rel.name, *reversed(rel.parent.parts)):
        m = _TASK_TAG.match(part)
        if m:
            return int(m.group(1))
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise PairingError(f"{d} is not a directory")
    gt_files = {p.relative_to(gt_dir) for p in gt_dir.rglob("*.txt")}
    pred_files = {p.relative_to(pred_dir) for p in pred_dir.rglob("*.txt")}
    if not gt_files:
        raise PairingError(f"no label files under {gt_dir}")
    missing = sorted(gt_files - pred_files)
    extra = sorted(pred_files - gt_files)
    if missing:
        raise PairingError(f"no prediction for {gt_dir / missing[0]} ({len(missing)} missing)")
    if extra:
        raise PairingError(f"no ground truth for {pred_dir / extra[0]} ({len(extra)} unpaired)")

    names: dict[Path, tuple[list[str], list[str]]] = {}
    used: dict[int, set[str]] = {}
    for rel in sorted(gt_files):
        g, p = read_label_names(gt_dir / rel), read_label_names(pred_dir / rel)
        if len(g) != len(p):
            raise PairingError(f"{pred_dir / rel}: {len(p)} frames, ground truth has {len(g)}")
        names[rel] = (p, g)
        used.setdefault(_task_of(rel), set()).update(g)
    mapping = Path(args.mapping).read_text(encoding="utf-8").splitlines()
    known: dict[tuple[int, str], bool] = {}
    for rel, (p, _) in sorted(names.items()):
        b = _task_of(rel)
        for n, name in enumerate(p, 1):
            if (b, name) not in known:
                try:
                    LabelSpace.from_mapping(mapping, {b: {name}}, args.mode)
                    known[(b, name)] = True
                except LabelingError:
                    known[(b, name)] = False
            if not known[(b, name)]:
                raise LabelingError(f"{pred_dir / rel}:{n}: action {name!r} is not in the mapping for task {b}")
            used[b].add(name)
    space = LabelSpace.from_mapping(mapping, used, args.mode)
    per_task: dict[int, list] = {}
    for rel, (p, g) in names.items():
        b = _task_of(rel)
        pl = SegmentLabeling.from_framewise([space.lookup(b, n) for n in p])
        gl = SegmentLabeling.from_framewise([space.lookup(b, n) for n in g])
        per_task.setdefault(b, []).append((pl, gl))
    report = MetricsReport({b: evaluate_pairs(pairs) for b, pairs in sorted(per_task.items())})
    sys.stdout.write(report.table())
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    report = check_seg(seed) if args.component == "seg" else check_tca(seed)
    print(f"{args.component} seed={seed}: {report}")
    if not report.passed:
        raise NumericError(f"{args.component} gradient check failed")
    return 0


def cmd_dump_replay(args) -> int:
    run_dir = Path(args.run)
    ckpt = run_dir / "checkpoints"
    decoders, pools = {}, {}
    for path in sorted(ckpt.glob("tca_task*.ckpt")):
        b = int(_TASK_TAG.search(path.stem).group(1))
        decoders[b] = TcaModel.load(path)
        pool_path = ckpt / f"pool_task{b:02d}.txt"
        try:
            lines = pool_path.read_text(encoding="utf-8").splitlines()
        except OSError:
            raise ConfigError(f"missing sequence pool {pool_path}") from None
        pools[b] = SequencePool.from_lines(b, lines)
    if not decoders:
        raise ConfigError(f"no cached decoders under {ckpt}; was the run made with strategy=tca?")
    names = {}
    for line in (run_dir / "mapping.txt").read_text(encoding="utf-8").splitlines():
        if line.strip():
            cid, name = line.split(maxsplit=1)
            names[int(cid)] = name.split(":", 1)[-1]
    seed = args.seed if args.seed is not None else 0
    out = _claim(Path(args.out) if args.out else default_out_root() / "replay", args.force)
    videos = build_replay_set(decoders, pools, args.count, args.mode, RandomSource(seed).child("dump"))
    written = dump_replay(videos, out, names)
    print(f"wrote {len(written)} replay videos to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", metavar="PATH", help="section.key = value file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="itas", description="Incremental temporal action segmentation with generative replay")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic procedural corpus")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="incremental training run")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="one run per value of an axis, plus a summary table")
    _common(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma separated values (ratio accepts percents)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="score prediction label files against ground truth")
    p.add_argument("--pred", required=True, metavar="DIR")
    p.add_argument("--gt", required=True, metavar="DIR")
    p.add_argument("--mapping", required=True, metavar="FILE")
    p.add_argument("--mode", choices=("disjoint", "blurry"), default="disjoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a training loss")
    p.add_argument("component", choices=("seg", "tca"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-replay", help="write replay videos from a run's cached decoders")
    p.add_argument("--run", required=True, metavar="DIR", help="run directory made with strategy=tca")
    p.add_argument("--mode", choices=MODES, default="coherent")
    p.add_argument("--count", type=int, default=10, help="number of videos (split over tasks)")
    _common(p, config=False)
    p.set_defaults(func=cmd_dump_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ItasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
