"""Line-oriented ``section.key = value`` run configuration.

Resolution order: dataclass defaults, then the config file, then ``--set``
overrides, then dedicated command-line flags. ``to_text`` emits every key,
so the snapshot written into a run directory reproduces the run on its own.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

from .data import SynthSpec
from .errors import ConfigError
from .replay import MODES
from .trainer import STRATEGIES, IncrementalRun, SegConfig, TcaConfig

OUT_ROOT_ENV = "ITAS_OUT_ROOT"


@dataclass
class DataSection:
    path: str = ""  # empty: synthesise from the [synth] section
    mode: str = "disjoint"
    seed: int = 0  # synthetic corpus seed, kept apart from run.seed so seed sweeps share one corpus


@dataclass
class RunSection:
    strategy: str = "tca"
    mode: str = "coherent"
    replay_size: int = 60
    task_order: str = ""  # comma separated task ids; empty keeps ascending order
    seed: int = 0
    out: str = ""


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSpec = field(default_factory=SynthSpec)
    run: RunSection = field(default_factory=RunSection)
    seg: SegConfig = field(default_factory=SegConfig)
    tca: TcaConfig = field(default_factory=TcaConfig)

    SECTIONS = ("data", "synth", "run", "seg", "tca")

    # -- key/value access -----------------------------------------------------

    def _section(self, name: str):
        if name not in self.SECTIONS:
            raise ConfigError(f"unknown config section {name!r}; expected one of {self.SECTIONS}")
        return getattr(self, name)

    def set(self, key: str, raw: str) -> None:
        section, dot, name = key.strip().partition(".")
        if not dot:
            raise ConfigError(f"config key {key!r} must look like section.key")
        obj = self._section(section)
        types = {f.name: f.type for f in fields(obj)}
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(key, raw.strip(), getattr(obj, name)))

    def items(self) -> list[tuple[str, object]]:
        out = []
        for s in self.SECTIONS:
            obj = getattr(self, s)
            out.extend((f"{s}.{f.name}", getattr(obj, f.name)) for f in fields(obj))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    # -- validation / conversion ------------------------------------------------

    def validate(self) -> None:
        if self.data.mode not in ("disjoint", "blurry"):
            raise ConfigError(f"data.mode must be disjoint or blurry, got {self.data.mode!r}")
        if self.run.strategy not in STRATEGIES:
            raise ConfigError(f"run.strategy must be one of {STRATEGIES}, got {self.run.strategy!r}")
        if self.run.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}, got {self.run.mode!r}")
        if self.run.replay_size < 0:
            raise ConfigError("run.replay_size must be >= 0")
        if not 0 < self.tca.ratio <= 1:
            raise ConfigError("tca.ratio must be in (0, 1]")
        for key, v in self.items():
            if key.endswith(("epochs", "layers", "channels", "latent", "hidden", "batch")) and v < 1:
                raise ConfigError(f"{key} must be >= 1")
            if key.endswith(".lr") and not v > 0:
                raise ConfigError(f"{key} must be > 0")
        self.task_order()
        if not self.data.path:
            self.synth.validate()

    def task_order(self) -> list[int] | None:
        text = self.run.task_order.strip()
        if not text:
            return None
        try:
            return [int(t) for t in text.replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"run.task_order must list integer task ids, got {text!r}") from None

    def incremental(self) -> IncrementalRun:
        return IncrementalRun(
            strategy=self.run.strategy,
            mode=self.run.mode,
            replay_size=self.run.replay_size,
            task_order=self.task_order(),
            seed=self.run.seed,
            seg=self.seg,
            tca=self.tca,
        )


def _coerce(key: str, raw: str, current):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_lines(cfg: RunConfig, lines: Iterable[str], source: str = "<config>") -> RunConfig:
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{n}: expected 'section.key = value', got {raw.strip()!r}")
        try:
            cfg.set(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{n}: {exc}") from None
    return cfg


def load_config(path: str | os.PathLike | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then ``path`` (if any), then ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        parse_lines(cfg, text.splitlines(), str(p))
    for item in overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key, value)
    return cfg


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))
