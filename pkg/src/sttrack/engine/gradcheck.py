"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def normwise_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over the whole tensor."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-3) -> np.ndarray:
    grad = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = float(fn().data)
        flat[i] = keep - h
        down = float(fn().data)
        flat[i] = keep
        out[i] = (up - down) / (2 * h)
    return grad


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    h: float = 1e-3,
    floor: float = 1e-6,
    normwise: bool = False,
) -> dict[str, float]:
    """Compare ``backward`` against central differences for each named tensor.

    Tensors must be float64 leaves with ``requires_grad`` set; ``fn`` must be
    a pure function of their current values. Returns the max relative error
    per tensor, entrywise by default or over the whole tensor with ``normwise``.
    """
    for _, t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        t.grad = None
    backward(fn(), [t for _, t in tensors])
    analytic = {name: t.grad.copy() for name, t in tensors}
    metric = normwise_error if normwise else relative_error
    return {name: metric(analytic[name], numeric_grad(fn, t, h), floor) for name, t in tensors}
