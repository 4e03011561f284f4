"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, default_dtype, no_grad


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    n_checked: int


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
    floor: float = 1e-6,
) -> list[GradCheckResult]:
    """Compare backprop grads of the scalar ``fn()`` with central differences.

    Parameters are promoted to float64 for the duration of the check and
    restored afterwards. ``fn`` must be deterministic. The reported error per
    tensor is ``||analytic - numeric|| / max(||analytic||, ||numeric||, floor)``
    over the checked entries; ``floor`` keeps identically-zero gradients
    (e.g. attention key biases) from dividing noise by noise. ``max_entries`` samples a random subset of
    coordinates per tensor.
    """
    rng = np.random.default_rng(seed)
    saved = [(p.data, p.grad) for p in params]
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    results = []
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        with default_dtype(np.float64):
            loss = fn()
            loss.backward()
            analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
            for name, p, a in zip(names, params, analytic):
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
                numeric = np.empty(idx.size)
                for j, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + eps
                    with no_grad():
                        plus = float(fn().data)
                    flat[i] = orig - eps
                    with no_grad():
                        minus = float(fn().data)
                    flat[i] = orig
                    numeric[j] = (plus - minus) / (2 * eps)
                an = a.reshape(-1)[idx]
                denom = max(np.linalg.norm(an), np.linalg.norm(numeric), floor)
                results.append(GradCheckResult(name, float(np.linalg.norm(an - numeric) / denom), idx.size))
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data = data
            p.grad = grad
    return results
