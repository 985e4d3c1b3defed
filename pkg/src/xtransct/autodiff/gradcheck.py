"""Central finite-difference checks of recorded gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, index: tuple, eps: float = 1e-5) -> float:
    """(f(p + eps) - f(p - eps)) / 2eps for a single element of ``param``."""
    orig = param.values[index].copy()
    with no_grad():
        param.values[index] = orig + eps
        plus = float(fn().values)
        param.values[index] = orig - eps
        minus = float(fn().values)
    param.values[index] = orig
    return (plus - minus) / (2 * eps)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    rng: np.random.Generator,
    samples_per_param: int = 5,
    eps: float = 1e-5,
) -> list[tuple[int, tuple, float, float]]:
    """Compare analytic and numeric gradients at randomly chosen elements.

    Returns ``(param_index, element_index, analytic, numeric)`` tuples. The
    caller is responsible for having run backward so that ``grad`` is set.
    """
    out = []
    for pi, p in enumerate(params):
        flat = rng.choice(p.size, size=min(samples_per_param, p.size), replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), p.shape)
            num = numeric_grad(fn, p, idx, eps)
            out.append((pi, idx, float(p.grad[idx]), num))
    return out
