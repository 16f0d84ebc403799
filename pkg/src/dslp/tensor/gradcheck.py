"""Central finite-difference oracle for checking reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from dslp.tensor.core import Tensor, backward, fresh_tape, no_grad


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d tensor by central differences, perturbing ``tensor.data`` in place."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_grads(fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.zero_grad()
    with fresh_tape():
        loss = fn()
        backward(loss)
    return [t.grad.copy() for t in tensors]


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor) over all entries."""
    num = np.abs(a - b)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((num / den).max()) if num.size else 0.0


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    floor: float = 1e-6) -> float:
    """Largest relative error between analytic and numerical gradients.

    ``floor`` keeps entries whose true gradient is ~0 from dominating the
    ratio; it should sit well above the finite-difference noise level.
    """
    analytic = analytic_grads(fn, tensors)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        gn = numerical_grad(fn, t, h)
        worst = max(worst, rel_error(ga, gn, floor))
    return worst
