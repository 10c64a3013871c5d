"""Finite-difference checks of the two training losses on small random instances."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .numeric import GradcheckReport, RandomSource, gradcheck, log_softmax
from .segmodel import SegModel, TasLossConfig, loss_tas
from .tca import TcaModel, loss_tca


def check_seg(
    seed: int = 0,
    T: int = 20,
    A: int = 3,
    D: int = 8,
    layers: int = 2,
    channels: int = 4,
    stop_grad: bool = True,
    tolerance: float = 1e-4,
    corrupt: Callable[[SegModel], None] | None = None,
) -> GradcheckReport:
    """Gradcheck of the segmentation loss w.r.t. every model parameter.

    With ``stop_grad`` the previous-frame log-probabilities are frozen at the
    starting parameters, so the analytic gradient is the exact derivative of
    the checked function. ``corrupt`` runs after every backward pass and may
    tamper with the gradients (negative control).
    """
    rng = RandomSource(seed).child("gradcheck", "seg")
    model = SegModel(D, list(range(A)), layers, channels, rng.child("model"))
    x = rng.normal((T, D))
    y = rng.integers(0, A, T)
    cfg = TasLossConfig(0.15, 4.0, stop_grad)
    frozen = log_softmax(model.forward(x)) if stop_grad else None

    def closure() -> float:
        model.zero_grad()
        logits, cache = model._forward(x)
        value, grad = loss_tas(logits, y, cfg, frozen)
        model.backward(cache, grad)
        if corrupt is not None:
            corrupt(model)
        return value

    return gradcheck(closure, model.parameters(), tolerance=tolerance)


def check_tca(
    seed: int = 0,
    D: int = 8,
    Z: int = 4,
    A: int = 3,
    hidden: int = 8,
    batch: int = 6,
    beta: float = 1.0,
    tolerance: float = 1e-4,
    corrupt: Callable[[TcaModel], None] | None = None,
) -> GradcheckReport:
    """Gradcheck of the negative ELBO with the reparametrisation noise held fixed."""
    rng = RandomSource(seed).child("gradcheck", "tca")
    model = TcaModel(D, list(range(A)), Z, hidden, rng.child("model"))
    x = rng.normal((batch, D))
    a = rng.integers(0, A, batch)
    c = rng.uniform(0.0, 1.0, batch)
    noise = rng.child("eps")

    def closure() -> float:
        model.zero_grad()
        # a fresh copy of the same stream every call keeps eps fixed
        value = loss_tca(model, x, a, c, noise.fresh(), beta).total
        if corrupt is not None:
            corrupt(model)
        return value

    return gradcheck(closure, model.parameters(), tolerance=tolerance)


def scale_first_grad(factor: float = 1.5) -> Callable:
    """Corruption fixture: scales the first layer's weight gradient."""

    def corrupt(model) -> None:
        p = model.parameters()[0]
        p.grad_weight *= factor

    return corrupt


__all__ = ["check_seg", "check_tca", "scale_first_grad"]
