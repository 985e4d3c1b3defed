"""Differentiable operations.

Shapes must match exactly except for :func:`add_bias`, which adds a vector
along the last axis. Anything else needs an explicit :func:`reshape`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, make_result


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.values + b.values, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return make_result(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.values.dtype.type(c)
    return make_result(a.values * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` with ``bias`` broadcast along the last axis only."""
    if bias.values.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias shape {bias.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.values.ndim - 1))
    return make_result(x.values + bias.values, (x, bias), lambda g: (g, g.sum(axis=lead)), "add_bias")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[..., m, k]`` by ``[..., k, n]``; leading extents must agree."""
    av, bv = a.values, b.values
    if av.ndim < 2 or av.ndim != bv.ndim or av.shape[:-2] != bv.shape[:-2] or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _bw(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_result(av @ bv, (a, b), _bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for 2D ``x`` of shape [n, in]; weight is [in, out]."""
    y = matmul(x, weight)
    return add_bias(y, bias) if bias is not None else y


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.values.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    vals = [t.values for t in tensors]
    axis = axis % vals[0].ndim
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate(vals, axis=axis), tuple(tensors), _bw, "concat")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return make_result(np.where(mask, x.values, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.values
    if not -v.ndim <= axis < v.ndim:
        raise ContractError(f"softmax: axis {axis} invalid for shape {x.shape}")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), _bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    v = x.values
    d = v.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.values
    lead = tuple(range(v.ndim - 1))

    def _bw(g):
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx = g * gv
        gxhat_mean = gx.mean(axis=-1, keepdims=True)
        gx_xhat_mean = (gx * xhat).mean(axis=-1, keepdims=True)
        return inv * (gx - gxhat_mean - xhat * gx_xhat_mean), g_gain, g_bias

    return make_result(xhat * gv + bias.values, (x, gain, bias), _bw, "layer_norm")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_result(np.asarray(x.values.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make_result(
        np.asarray(x.values.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean"
    )


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences; ``target`` is treated as data."""
    _same_shape(pred, target, "mse")
    diff = pred.values - target.values
    n = diff.size

    def _bw(g):
        gp = diff * (2.0 * g / n)
        return gp, -gp

    return make_result(np.asarray((diff * diff).mean()), (pred, target), _bw, "mse")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv2d: extent {size} with kernel {kernel}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlate a [C, H, W] input with [K, C, h, w] kernels (no flip)."""
    xv, kv = x.values, kernels.values
    if xv.ndim != 3 or kv.ndim != 4 or kv.shape[1] != xv.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    C, H, W = xv.shape
    K, _, kh, kw = kv.shape
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    xp = np.pad(xv, ((0, 0), (padding, padding), (padding, padding))) if padding else xv
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]  # C,Ho,Wo,kh,kw
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(Ho * Wo, C * kh * kw)
    kmat = kv.reshape(K, C * kh * kw)
    out = (kmat @ cols.T).reshape(K, Ho, Wo)
    parents: tuple[Tensor, ...] = (x, kernels)
    if bias is not None:
        if bias.shape != (K,):
            raise DimensionError(f"conv2d: bias {bias.shape} does not match {K} kernels")
        out = out + bias.values[:, None, None]
        parents = parents + (bias,)

    def _bw(g):
        g2 = g.reshape(K, Ho * Wo)
        gk = (g2 @ cols).reshape(kv.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2.T @ kmat).reshape(Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, :, i, j].transpose(2, 0, 1)
            gx = gxp[:, padding : padding + H, padding : padding + W] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return make_result(out, parents, _bw, "conv2d")
