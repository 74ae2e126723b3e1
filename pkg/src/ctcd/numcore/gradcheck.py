"""Central finite differences, kept free of any tape machinery."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from ctcd.numcore.autodiff import DenseArray, backward


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(
    loss_fn: Callable[[], DenseArray],
    params: Sequence[DenseArray],
    step: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and finite differences.

    ``loss_fn`` must rebuild the graph from the current ``params`` data on each
    call and return a shape-[1] array.
    """
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(lambda: loss_fn().item(), p.data, step)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst
