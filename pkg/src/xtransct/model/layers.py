"""Building blocks: residual conv backbone, attention, encoder and decoder layers, block head."""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import Conv2d, LayerNorm, Linear, Module, Tensor, ops


class ResidualStage(Module):
    """Halve the spatial extent: two convs on the main path, a 2x2 stride-2 projection on the skip."""

    def __init__(self, c_in: int, c_out: int, rng, dtype):
        super().__init__()
        self.conv_a = Conv2d(c_in, c_out, 4, rng, stride=2, padding=1, dtype=dtype)
        self.conv_b = Conv2d(c_out, c_out, 3, rng, stride=1, padding=1, dtype=dtype)
        self.skip = Conv2d(c_in, c_out, 2, rng, stride=2, padding=0, dtype=dtype, gain=1.0)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv_b(ops.relu(self.conv_a(x)))
        return ops.relu(ops.add(h, self.skip(x)))


class Backbone(Module):
    """Stem conv followed by stride-2 residual stages; output [C, g, g]."""

    def __init__(self, stem_channels: int, stem_stride: int, channels, rng, dtype):
        super().__init__()
        k = 3 if stem_stride == 1 else 4
        self.stem = Conv2d(1, stem_channels, k, rng, stride=stem_stride, padding=1, dtype=dtype)
        stages = []
        c_in = stem_channels
        for c in channels:
            stages.append(ResidualStage(c_in, c, rng, dtype))
            c_in = c
        self.stages = stages
        self.out_channels = c_in

    def __call__(self, img: Tensor) -> Tensor:
        x = ops.relu(self.stem(img))
        for stage in self.stages:
            x = stage(x)
        return x


class Attention(Module):
    """Multi-head scaled dot-product attention from a query stream onto a key/value stream."""

    def __init__(self, d: int, heads: int, rng, dtype):
        super().__init__()
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)
        self.heads = heads
        self.d = d

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return ops.transpose(ops.reshape(x, (n, self.heads, self.d // self.heads)), (1, 0, 2))

    def keys_values(self, memory: Tensor) -> tuple[Tensor, Tensor]:
        """Per-head keys [h, dk, M] and values [h, M, dk]; reusable across query chunks."""
        k = ops.transpose(self._split(self.k(memory)), (0, 2, 1))
        v = self._split(self.v(memory))
        return k, v

    def __call__(self, x: Tensor, memory: Tensor | None = None, kv=None) -> Tensor:
        if kv is None:
            kv = self.keys_values(x if memory is None else memory)
        k, v = kv
        q = self._split(self.q(x))
        scores = ops.scale(ops.matmul(q, k), 1.0 / math.sqrt(self.d // self.heads))
        att = ops.softmax(scores, axis=-1)
        ctx = ops.matmul(att, v)  # h, n, dk
        n = x.shape[0]
        return self.o(ops.reshape(ops.transpose(ctx, (1, 0, 2)), (n, self.d)))


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng, dtype):
        super().__init__()
        self.fc1 = Linear(d, hidden, rng, dtype, gain=math.sqrt(2.0))
        self.fc2 = Linear(hidden, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention and feed-forward sublayers with residuals."""

    def __init__(self, d: int, heads: int, ff: int, rng, dtype):
        super().__init__()
        self.norm1 = LayerNorm(d, dtype)
        self.attn = Attention(d, heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ff = FeedForward(d, ff, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.ff(self.norm2(x)))


class DecoderLayer(Module):
    """Pre-norm cross-attention onto encoder memory plus feed-forward.

    There is no self-attention among queries, so each query's output depends
    only on itself and the memory.
    """

    def __init__(self, d: int, heads: int, ff: int, rng, dtype):
        super().__init__()
        self.norm1 = LayerNorm(d, dtype)
        self.cross = Attention(d, heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ff = FeedForward(d, ff, rng, dtype)

    def __call__(self, x: Tensor, kv) -> Tensor:
        x = ops.add(x, self.cross(self.norm1(x), kv=kv))
        return ops.add(x, self.ff(self.norm2(x)))


class BlockHead(Module):
    """ReLU MLP from a decoder feature to B^3 voxel values squashed into [0, 1]."""

    def __init__(self, d: int, hidden: int, layers: int, block: int, rng, dtype):
        super().__init__()
        dims = [d] + [hidden] * layers
        self.hidden = [Linear(a, b, rng, dtype, gain=math.sqrt(2.0)) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(dims[-1], block ** 3, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.hidden:
            x = ops.relu(layer(x))
        return ops.sigmoid(self.out(x))


def positional_table(rng: np.random.Generator, n: int, d: int, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal((n, d)) * std).astype(dtype)
