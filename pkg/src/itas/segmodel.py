"""Single-stage dilated residual TCN and the frame-wise segmentation losses."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint
from .data import FeatureSequence, SegmentLabeling
from .errors import ConfigError, FormatError, LabelingError, LabelSpaceError, ShapeError
from .numeric import (
    LayerParams,
    RandomSource,
    dilated_conv1d_backward,
    dilated_conv1d_forward,
    linear_backward,
    linear_forward,
    log_softmax,
    log_softmax_backward,
    relu,
    relu_backward,
)


@dataclass
class TasLossConfig:
    smoothing: float = 0.15
    tau: float = 4.0
    stop_grad: bool = True

    def __post_init__(self):
        if self.smoothing < 0 or self.tau <= 0:
            raise ConfigError(f"need smoothing >= 0 and tau > 0, got {self.smoothing}, {self.tau}")


class SegModel:
    """Input projection, ``layers`` dilated residual blocks, output projection.

    Block ``l`` uses dilation ``2**l``. Head column ``j`` scores the global
    class id ``classes[j]``; the head grows with :meth:`expand_head`.
    """

    def __init__(
        self,
        in_dim: int,
        classes: Sequence[int],
        layers: int = 8,
        channels: int = 64,
        rng: RandomSource | None = None,
    ):
        rng = rng or RandomSource(0)
        self.in_dim = in_dim
        self.layers = layers
        self.channels = channels
        self.classes = [int(c) for c in classes]
        if len(set(self.classes)) != len(self.classes):
            raise LabelSpaceError(f"duplicate class ids in head: {self.classes}")
        self.in_proj = LayerParams.dense(in_dim, channels, rng.child("in"))
        self.blocks = [
            (LayerParams.conv(channels, channels, rng.child("conv", l)), LayerParams.dense(channels, channels, rng.child("pw", l)))
            for l in range(layers)
        ]
        self.out_proj = LayerParams.dense(channels, len(self.classes), rng.child("out"))
        self._head_rng = rng.child("head")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def parameters(self) -> list[LayerParams]:
        return [self.in_proj, *(p for blk in self.blocks for p in blk), self.out_proj]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward / backward ------------------------------------------------

    def _forward(self, x) -> tuple[np.ndarray, tuple]:
        if isinstance(x, FeatureSequence):
            x = x.values
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"input shape {x.shape} does not match model input dim {self.in_dim}")
        h = linear_forward(self.in_proj, x)
        trace = []
        for l, (conv, pw) in enumerate(self.blocks):
            u = dilated_conv1d_forward(conv, h, 2**l)
            r = relu(u)
            trace.append((h, u, r))
            h = h + linear_forward(pw, r)
        logits = linear_forward(self.out_proj, h)
        return logits, (x, trace, h)

    def forward(self, x) -> np.ndarray:
        return self._forward(x)[0]

    def backward(self, cache: tuple, grad_logits: np.ndarray) -> np.ndarray:
        x, trace, h_last = cache
        g = linear_backward(self.out_proj, h_last, grad_logits)
        for l in range(self.layers - 1, -1, -1):
            conv, pw = self.blocks[l]
            h, u, r = trace[l]
            g_r = linear_backward(pw, r, g)
            g = g + dilated_conv1d_backward(conv, h, relu_backward(u, g_r), 2**l)
        return linear_backward(self.in_proj, x, g)

    # -- label plumbing -----------------------------------------------------

    def columns(self, labels: np.ndarray) -> np.ndarray:
        """Map global class ids to head columns."""
        index = {c: j for j, c in enumerate(self.classes)}
        try:
            return np.fromiter((index[int(a)] for a in labels), dtype=np.int64, count=len(labels))
        except KeyError as exc:
            raise LabelingError(f"class id {exc.args[0]} is not in the model head {self.classes}") from None

    def expand_head(self, new_classes: Sequence[int], mode: str = "disjoint") -> list[int]:
        """Append head columns for unseen classes, keeping old columns bit-exact."""
        new = [int(c) for c in new_classes]
        if mode == "disjoint":
            dup = sorted(set(new) & set(self.classes))
            if dup or len(set(new)) != len(new):
                raise LabelSpaceError(f"class ids {dup or new} already present in disjoint mode")
        added = [c for c in dict.fromkeys(new) if c not in self.classes]
        if not added:
            return []
        fresh = LayerParams.dense(self.channels, len(added), self._head_rng.child(*added))
        self.out_proj = LayerParams(
            np.concatenate([self.out_proj.weight, fresh.weight], axis=1),
            np.concatenate([self.out_proj.bias, fresh.bias]),
        )
        self.classes.extend(added)
        return added

    # -- persistence --------------------------------------------------------

    def hparams(self) -> dict:
        return {"in_dim": self.in_dim, "layers": self.layers, "channels": self.channels, "classes": self.classes}

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"in.w": self.in_proj.weight, "in.b": self.in_proj.bias}
        for l, (conv, pw) in enumerate(self.blocks):
            out[f"conv{l}.w"], out[f"conv{l}.b"] = conv.weight, conv.bias
            out[f"pw{l}.w"], out[f"pw{l}.b"] = pw.weight, pw.bias
        out["out.w"], out["out.b"] = self.out_proj.weight, self.out_proj.bias
        return out

    def save(self, path: str | os.PathLike) -> None:
        checkpoint.save(path, "segmodel", self.hparams(), self.arrays())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SegModel":
        kind, hp, arrays = checkpoint.load(path)
        if kind != "segmodel":
            raise FormatError(f"{path}: expected a segmodel checkpoint, got {kind!r}")
        m = cls(hp["in_dim"], hp["classes"], hp["layers"], hp["channels"])
        m.in_proj = LayerParams(arrays["in.w"], arrays["in.b"])
        m.blocks = [
            (LayerParams(arrays[f"conv{l}.w"], arrays[f"conv{l}.b"]), LayerParams(arrays[f"pw{l}.w"], arrays[f"pw{l}.b"]))
            for l in range(m.layers)
        ]
        m.out_proj = LayerParams(arrays["out.w"], arrays["out.b"])
        return m


# ---------------------------------------------------------------------------
# losses; each returns (value, gradient w.r.t. logits)


def loss_cls(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    T, A = logits.shape
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (T,):
        raise ShapeError(f"{y.shape[0] if y.ndim else 0} labels for {T} frames")
    if y.size and (y.max() >= A or y.min() < 0):
        raise LabelingError(f"label id out of range for {A} classes")
    logp = log_softmax(logits)
    rows = np.arange(T)
    value = -logp[rows, y].mean()
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return float(value), grad / T


def loss_sm(
    logits: np.ndarray, tau: float = 4.0, stop_grad: bool = True, frozen_logp: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Truncated squared difference of adjacent-frame log-probabilities.

    With ``stop_grad`` the previous frame is treated as a constant. Passing
    ``frozen_logp`` substitutes a fixed array for the previous-frame term,
    which makes the stopped gradient the exact derivative of the returned
    value (used by gradient checks).
    """
    T, A = logits.shape
    if T < 2:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    prev = (frozen_logp if frozen_logp is not None else logp)[:-1]
    diff = logp[1:] - prev
    inside = np.abs(diff) < tau
    value = np.minimum(np.abs(diff), tau) ** 2
    scale = 2.0 / (T * A)
    g_logp = np.zeros_like(logp)
    g_logp[1:] = scale * diff * inside
    if not stop_grad and frozen_logp is None:
        g_logp[:-1] -= scale * diff * inside
    return float(value.sum() / (T * A)), log_softmax_backward(logp, g_logp)


def loss_tas(
    logits: np.ndarray, y: np.ndarray, cfg: TasLossConfig = TasLossConfig(), frozen_logp: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    cls_value, cls_grad = loss_cls(logits, y)
    if cfg.smoothing == 0:
        return cls_value, cls_grad
    sm_value, sm_grad = loss_sm(logits, cfg.tau, cfg.stop_grad, frozen_logp)
    return cls_value + cfg.smoothing * sm_value, cls_grad + cfg.smoothing * sm_grad


def predict(model: SegModel, x) -> SegmentLabeling:
    """Frame-wise argmax; ties go to the lowest class id."""
    return decode_logits(model.forward(x), model.classes)


def decode_logits(logits: np.ndarray, classes: Sequence[int]) -> SegmentLabeling:
    classes = np.asarray(classes, dtype=np.int64)
    order = np.argsort(classes, kind="stable")
    # argmax over columns sorted by class id picks the lowest id among ties
    best = np.argmax(logits[:, order], axis=1)
    return SegmentLabeling.from_framewise(classes[order][best])
