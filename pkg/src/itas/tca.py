"""Temporally coherent action model: a conditional VAE over single frames.

The encoder sees ``[x, onehot(a), c]`` and emits the mean and log-variance
of a diagonal Gaussian posterior; the decoder maps ``[z, onehot(a), c]``
back to a frame. ``c`` is the relative position of the frame inside its
action segment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint
from .data import TaskDataset, ceil_count, coherence_ramp
from .errors import ConfigError, DataError, DomainError, FormatError, NumericError, ShapeError
from .numeric import Adam, LayerParams, RandomSource, linear_backward, linear_forward, relu, relu_backward


def coherence(i: int, length: int) -> float:
    """Relative progression of 1-based frame ``i`` in a segment of ``length`` frames."""
    if length < 1 or not 1 <= i <= length:
        raise DomainError(f"frame index {i} outside segment of length {length}")
    if length == 1:
        return 0.0
    return (i - 1) / (length - 1)


@dataclass
class LatentSample:
    mu: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    eps: np.ndarray


@dataclass
class TcaLoss:
    total: float
    recon: float
    reg: float


class TcaModel:
    def __init__(
        self,
        feature_dim: int,
        classes: Sequence[int],
        latent_dim: int = 16,
        hidden: int = 64,
        rng: RandomSource | None = None,
    ):
        rng = rng or RandomSource(0)
        self.feature_dim = feature_dim
        self.classes = [int(c) for c in classes]
        self.latent_dim = latent_dim
        self.hidden = hidden
        A = len(self.classes)
        self.enc1 = LayerParams.dense(feature_dim + A + 1, hidden, rng.child("enc1"))
        self.enc2 = LayerParams.dense(hidden, 2 * latent_dim, rng.child("enc2"))
        self.dec1 = LayerParams.dense(latent_dim + A + 1, hidden, rng.child("dec1"))
        self.dec2 = LayerParams.dense(hidden, feature_dim, rng.child("dec2"))
        self._index = {c: j for j, c in enumerate(self.classes)}

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def parameters(self) -> list[LayerParams]:
        return [self.enc1, self.enc2, self.dec1, self.dec2]

    def encoder_params(self) -> list[LayerParams]:
        return [self.enc1, self.enc2]

    def decoder_params(self) -> list[LayerParams]:
        return [self.dec1, self.dec2]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def condition(self, a, c, rows: int | None = None) -> np.ndarray:
        """Stacked ``[onehot(a), c]`` rows for class ids ``a`` and coherences ``c``.

        A single (a, c) pair is repeated to ``rows`` rows when given.
        """
        a = np.atleast_1d(np.asarray(a, dtype=np.int64))
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        if a.shape != c.shape:
            a, c = np.broadcast_arrays(a, c)
        try:
            cols = np.fromiter((self._index[int(v)] for v in a), dtype=np.int64, count=a.size)
        except KeyError as exc:
            raise DomainError(f"class id {exc.args[0]} not modelled (classes {self.classes})") from None
        if np.any((c < 0) | (c > 1)):
            raise DomainError("coherence values must lie in [0, 1]")
        out = np.zeros((a.size, self.num_classes + 1))
        out[np.arange(a.size), cols] = 1.0
        out[:, -1] = c
        if rows is not None and out.shape[0] != rows:
            if out.shape[0] != 1:
                raise ShapeError(f"{out.shape[0]} conditions for {rows} rows")
            out = np.repeat(out, rows, axis=0)
        return out

    # -- encoder / decoder ----------------------------------------------------

    def _encode(self, x: np.ndarray, cond: np.ndarray):
        inp = np.concatenate([x, cond], axis=1)
        pre = linear_forward(self.enc1, inp)
        hid = relu(pre)
        out = linear_forward(self.enc2, hid)
        mu, logvar = out[:, : self.latent_dim], out[:, self.latent_dim :]
        return mu, logvar, (inp, pre, hid)

    def _decode(self, z: np.ndarray, cond: np.ndarray):
        inp = np.concatenate([z, cond], axis=1)
        pre = linear_forward(self.dec1, inp)
        hid = relu(pre)
        return linear_forward(self.dec2, hid), (inp, pre, hid)

    def encode(self, x, a, c, rng: RandomSource) -> LatentSample:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.feature_dim:
            raise ShapeError(f"frame shape {x.shape} does not match feature dim {self.feature_dim}")
        mu, logvar, _ = self._encode(x, self.condition(a, c, x.shape[0]))
        sigma = np.exp(0.5 * logvar)
        eps = rng.normal(mu.shape)
        return LatentSample(mu, sigma, mu + sigma * eps, eps)

    def decode(self, z, a, c) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        cond = self.condition(a, c)
        if z.shape[0] == 1 and cond.shape[0] > 1:
            z = np.repeat(z, cond.shape[0], axis=0)
        elif cond.shape[0] == 1 and z.shape[0] > 1:
            cond = np.repeat(cond, z.shape[0], axis=0)
        elif cond.shape[0] != z.shape[0]:
            raise ShapeError(f"{z.shape[0]} latent rows for {cond.shape[0]} conditions")
        if z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent shape {z.shape} does not match latent dim {self.latent_dim}")
        return self._decode(z, cond)[0]

    # -- persistence ----------------------------------------------------------

    def hparams(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "classes": self.classes,
            "latent_dim": self.latent_dim,
            "hidden": self.hidden,
        }

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in zip(("enc1", "enc2", "dec1", "dec2"), self.parameters()):
            out[f"{name}.w"], out[f"{name}.b"] = p.weight, p.bias
        return out

    def save(self, path: str | os.PathLike) -> None:
        checkpoint.save(path, "tca", self.hparams(), self.arrays())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TcaModel":
        kind, hp, arrays = checkpoint.load(path)
        if kind != "tca":
            raise FormatError(f"{path}: expected a tca checkpoint, got {kind!r}")
        m = cls(hp["feature_dim"], hp["classes"], hp["latent_dim"], hp["hidden"])
        for name in ("enc1", "enc2", "dec1", "dec2"):
            setattr(m, name, LayerParams(arrays[f"{name}.w"], arrays[f"{name}.b"]))
        return m


def kl_standard_normal(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-row KL(N(mu, exp(logvar)) || N(0, I))."""
    return 0.5 * np.sum(mu**2 + np.exp(logvar) - 1.0 - logvar, axis=-1)


def loss_tca(
    m: TcaModel, x: np.ndarray, a, c, rng: RandomSource, beta: float = 1.0, backward: bool = True
) -> TcaLoss:
    """Negative ELBO on a batch of frames; accumulates gradients when ``backward``.

    ``recon`` is the batch mean of the squared reconstruction error summed
    over feature dimensions, ``reg`` the batch mean KL to the standard normal
    prior, and ``total = recon + beta * reg``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if n == 0:
        raise DataError("empty TCA batch")
    cond = m.condition(a, c, n)
    mu, logvar, enc_cache = m._encode(x, cond)
    sigma = np.exp(0.5 * logvar)
    eps = rng.normal(mu.shape)
    z = mu + sigma * eps
    xhat, dec_cache = m._decode(z, cond)
    resid = xhat - x
    recon = float(np.sum(resid**2) / n)
    reg = float(np.sum(kl_standard_normal(mu, logvar)) / n)
    total = recon + beta * reg
    if not np.isfinite(total):
        raise NumericError("non-finite TCA loss")
    if backward:
        g_xhat = 2.0 * resid / n
        inp, pre, hid = dec_cache
        g_hid = linear_backward(m.dec2, hid, g_xhat)
        g_inp = linear_backward(m.dec1, inp, relu_backward(pre, g_hid))
        g_z = g_inp[:, : m.latent_dim]
        g_mu = g_z + beta * mu / n
        g_logvar = g_z * eps * 0.5 * sigma + beta * 0.5 * (np.exp(logvar) - 1.0) / n
        inp, pre, hid = enc_cache
        g_hid = linear_backward(m.enc2, hid, np.concatenate([g_mu, g_logvar], axis=1))
        linear_backward(m.enc1, inp, relu_backward(pre, g_hid))
    return TcaLoss(total, recon, reg)


def frame_triples(items) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All (frame, action, coherence) triples of the given items."""
    xs, acts, cs = [], [], []
    for item in items:
        for seg in item.labels.segments:
            xs.append(item.features.values[seg.start : seg.end])
            acts.append(np.full(seg.length, seg.action, dtype=np.int64))
            cs.append(coherence_ramp(seg.length))
    return np.concatenate(xs), np.concatenate(acts), np.concatenate(cs)


def select_items(task: TaskDataset, ratio: float, rng: RandomSource) -> list:
    if not 0 < ratio <= 1:
        raise ConfigError(f"TCA data ratio must be in (0, 1], got {ratio}")
    n = len(task.train)
    if n == 0:
        raise DataError(f"task {task.task} has no training items for the TCA model")
    k = ceil_count(ratio, n)
    if k == n:
        return list(task.train)
    picked = np.sort(rng.permutation(n)[:k])
    return [task.train[i] for i in picked]


def train_tca(
    m: TcaModel,
    task: TaskDataset,
    ratio: float = 1.0,
    epochs: int = 200,
    lr: float = 1e-3,
    rng: RandomSource | None = None,
    beta: float = 1.0,
    batch_size: int = 64,
) -> list[float]:
    """Fit ``m`` on the frames of a task; returns the mean loss of every epoch."""
    rng = rng or RandomSource(0)
    items = select_items(task, ratio, rng.child("select"))
    x, a, c = frame_triples(items)
    opt = Adam(m.parameters(), lr=lr)
    n = x.shape[0]
    history = []
    for epoch in range(epochs):
        erng = rng.child("epoch", epoch)
        order = erng.permutation(n)
        total, batches = 0.0, 0
        for k, lo in enumerate(range(0, n, batch_size)):
            idx = order[lo : lo + batch_size]
            m.zero_grad()
            loss = loss_tca(m, x[idx], a[idx], c[idx], erng.child(k), beta)
            opt.step()
            total += loss.total
            batches += 1
        history.append(total / batches)
    return history


def mean_recon(m: TcaModel, items, rng: RandomSource) -> float:
    x, a, c = frame_triples(items)
    return loss_tca(m, x, a, c, rng, backward=False).recon


def init_zero(m: TcaModel) -> TcaModel:
    for p in m.parameters():
        p.weight[...] = 0.0
        p.bias[...] = 0.0
    return m


__all__ = [
    "LatentSample",
    "TcaLoss",
    "TcaModel",
    "coherence",
    "coherence_ramp",
    "frame_triples",
    "init_zero",
    "kl_standard_normal",
    "loss_tca",
    "mean_recon",
    "select_items",
    "train_tca",
]
