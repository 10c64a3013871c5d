"""Small differentiable building blocks with explicit forward/backward passes.

Everything works on float64 numpy arrays laid out as (frames, channels).
Backward functions *accumulate* into the gradient buffers of the
:class:`LayerParams` they receive, so calling them twice with ``g`` is the
same as calling them once with ``2 * g``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DeterminismError, ShapeError

# ---------------------------------------------------------------------------
# random source


def _stream_key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


class RandomSource:
    """Seeded PCG64 stream with deterministic named substreams."""

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *_path])
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *names) -> "RandomSource":
        """Independent substream addressed by ``names`` (ints or strings)."""
        return RandomSource(self.seed, self._path + tuple(_stream_key(n) for n in names))

    def fresh(self) -> "RandomSource":
        """A new source replaying this stream from its start."""
        return RandomSource(self.seed, self._path)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, path={self._path})"


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray
    grad_weight: np.ndarray = field(init=False, repr=False)
    grad_bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def dense(cls, n_in: int, n_out: int, rng: RandomSource) -> "LayerParams":
        bound = 1.0 / math.sqrt(n_in)
        return cls(rng.uniform(-bound, bound, (n_in, n_out)), rng.uniform(-bound, bound, n_out))

    @classmethod
    def conv(cls, n_in: int, n_out: int, rng: RandomSource, kernel: int = 3) -> "LayerParams":
        bound = 1.0 / math.sqrt(kernel * n_in)
        return cls(
            rng.uniform(-bound, bound, (kernel, n_in, n_out)),
            rng.uniform(-bound, bound, n_out),
        )

    @classmethod
    def zeros(cls, *weight_shape: int) -> "LayerParams":
        return cls(np.zeros(weight_shape), np.zeros(weight_shape[-1]))

    def zero_grad(self) -> None:
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]

    def copy(self) -> "LayerParams":
        return LayerParams(self.weight.copy(), self.bias.copy())


def zero_grad(params: Iterable[LayerParams]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# dense layer


def _check_2d(x: np.ndarray, what: str) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{what} must be 2-D, got shape {x.shape}")


def linear_forward(params: LayerParams, x: np.ndarray) -> np.ndarray:
    _check_2d(x, "input")
    if x.shape[1] != params.weight.shape[0]:
        raise ShapeError(f"input shape {x.shape} does not match weight shape {params.weight.shape}")
    return x @ params.weight + params.bias


def linear_backward(params: LayerParams, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != (x.shape[0], params.weight.shape[1]):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} inconsistent with input {x.shape} "
            f"and weight {params.weight.shape}"
        )
    params.grad_weight += x.T @ grad_out
    params.grad_bias += grad_out.sum(axis=0)
    return grad_out @ params.weight.T


# ---------------------------------------------------------------------------
# dilated temporal convolution, kernel 3, zero padding keeps T


def _padded(x: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros((x.shape[0] + 2 * d, x.shape[1]))
    out[d : d + x.shape[0]] = x
    return out


def dilated_conv1d_forward(params: LayerParams, x: np.ndarray, dilation: int) -> np.ndarray:
    """Taps at ``t - dilation``, ``t`` and ``t + dilation``; borders read zeros."""
    _check_2d(x, "input")
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    k, c_in, _ = params.weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"input shape {x.shape} does not match kernel shape {params.weight.shape}")
    T = x.shape[0]
    xp = _padded(x, dilation)
    out = np.broadcast_to(params.bias, (T, params.bias.shape[0])).copy()
    for j in range(k):
        out += xp[j * dilation : j * dilation + T] @ params.weight[j]
    return out


def dilated_conv1d_backward(
    params: LayerParams, x: np.ndarray, grad_out: np.ndarray, dilation: int
) -> np.ndarray:
    k, c_in, c_out = params.weight.shape
    T = x.shape[0]
    if grad_out.shape != (T, c_out):
        raise ShapeError(f"grad_out shape {grad_out.shape} inconsistent with ({T}, {c_out})")
    xp = _padded(x, dilation)
    gxp = np.zeros_like(xp)
    for j in range(k):
        lo = j * dilation
        params.grad_weight[j] += xp[lo : lo + T].T @ grad_out
        gxp[lo : lo + T] += grad_out @ params.weight[j].T
    params.grad_bias += grad_out.sum(axis=0)
    return gxp[dilation : dilation + T]


# ---------------------------------------------------------------------------
# activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(x))


def log_softmax_backward(logp: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out - np.exp(logp) * grad_out.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return p * (grad_out - (grad_out * p).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment optimizer over a fixed list of :class:`LayerParams`."""

    def __init__(
        self,
        params: Sequence[LayerParams],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for p in self.params for a, _ in p.pairs()]
        self.v = [np.zeros_like(a) for p in self.params for a, _ in p.pairs()]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        i = 0
        for p in self.params:
            for value, grad in p.pairs():
                m, v = self.m[i], self.v[i]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                value -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                i += 1


def adam_step(opt: Adam, lr: float | None = None) -> None:
    opt.step(lr)


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst: tuple[int, str, tuple[int, ...]] | None
    analytic: float
    numeric: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = ""
        if self.worst is not None:
            layer, name, idx = self.worst
            where = (
                f" worst=param[{layer}].{name}{list(idx)}"
                f" analytic={self.analytic:.6e} numeric={self.numeric:.6e}"
            )
        return (
            f"gradcheck {status}: max_rel_err={self.max_rel_err:.3e} "
            f"tol={self.tolerance:.1e} coords={self.checked}{where}"
        )


def gradcheck(
    closure: Callable[[], float],
    params: Sequence[LayerParams],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: RandomSource | None = None,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare analytic gradients with central differences.

    ``closure`` must zero the gradients, evaluate the loss, run the backward
    pass and return the loss value. It is called once for the analytic
    gradients and twice per checked coordinate. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. When ``max_coords`` is given, that many
    coordinates per array are sampled with ``rng``; otherwise all are checked.
    """
    base = closure()
    again = closure()
    if base != again:
        raise DeterminismError(f"loss closure is not deterministic: {base!r} != {again!r}")
    analytic = [[g.copy() for _, g in p.pairs()] for p in params]

    worst_err, worst, worst_a, worst_n = 0.0, None, 0.0, 0.0
    checked = 0
    for li, p in enumerate(params):
        for (value, _), grad, name in zip(p.pairs(), analytic[li], ("weight", "bias")):
            n = value.size
            if max_coords is not None and n > max_coords:
                picker = rng or RandomSource(0)
                flat = picker.gen.choice(n, size=max_coords, replace=False)
            else:
                flat = np.arange(n)
            for f in flat:
                idx = np.unravel_index(int(f), value.shape)
                orig = value[idx]
                value[idx] = orig + step
                plus = closure()
                value[idx] = orig - step
                minus = closure()
                value[idx] = orig
                num = (plus - minus) / (2.0 * step)
                a = grad[idx]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                checked += 1
                if err > worst_err or worst is None:
                    worst_err, worst, worst_a, worst_n = err, (li, name, tuple(int(i) for i in idx)), a, num
    # leave the analytic gradients in place for the caller
    closure()
    return GradcheckReport(worst_err, worst, float(worst_a), float(worst_n), checked, tolerance)
