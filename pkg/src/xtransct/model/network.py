"""The reconstruction network and block assembly."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..autodiff import LayerNorm, Linear, Module, Tensor, no_grad, ops, parameter
from ..errors import ConfigurationError, ContractError
from ..volume import Volume
from .config import ModelConfig, query_grid
from .layers import Backbone, BlockHead, DecoderLayer, EncoderLayer, positional_table

DEFAULT_CHUNK = 512

# parameter-name prefix -> optimizer group
GROUPS = {
    "backbone": "backbone",
    "token_proj": "encoder",
    "token_pos": "encoder",
    "encoder": "encoder",
    "encoder_norm": "encoder",
    "coords": "coords",
    "decoder": "decoder",
    "decoder_norm": "decoder",
    "head": "head",
}


def group_of(name: str) -> str:
    return GROUPS[name.split(".", 1)[0]]


def _pixels(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


class XTransCT(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        cfg = config.validate()
        self.config = cfg
        rng = np.random.Generator(np.random.Philox(cfg.init_seed))
        dt = cfg.np_dtype
        d = cfg.d_model
        self.backbone = Backbone(cfg.stem_channels, cfg.stem_stride, cfg.backbone_channels, rng, dt)
        self.token_proj = Linear(self.backbone.out_channels, d, rng, dt)
        self.token_pos = parameter(positional_table(rng, cfg.token_count, d, cfg.pos_std, dt))
        self.encoder = [EncoderLayer(d, cfg.heads, cfg.ff_dim, rng, dt) for _ in range(cfg.encoder_layers)]
        self.encoder_norm = LayerNorm(d, dt)
        self.coords = Linear(3, d, rng, dt)
        self.decoder = [DecoderLayer(d, cfg.heads, cfg.ff_dim, rng, dt) for _ in range(cfg.decoder_layers)]
        self.decoder_norm = LayerNorm(d, dt)
        self.head = BlockHead(d, cfg.head_hidden, cfg.head_layers, cfg.block, rng, dt)

    @property
    def dtype(self):
        return self.token_pos.dtype

    def parameter_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        out: dict[str, list] = {}
        for name, p in self.named_parameters():
            out.setdefault(group_of(name), []).append((name, p))
        return out

    # -- stages ---------------------------------------------------------------

    def _image_tensor(self, img) -> Tensor:
        px = _pixels(img)
        s = self.config.image_size
        if px.shape != (s, s):
            raise ConfigurationError(f"projection shape {px.shape} does not match model image_size {s}")
        return Tensor(px[None].astype(self.dtype))

    def image_tokens(self, img) -> Tensor:
        """One image's g*g tokens in row-major grid order, projected to d_model (no positions)."""
        feat = self.backbone(self._image_tensor(img))  # C, g, g
        c, g, _ = feat.shape
        flat = ops.transpose(ops.reshape(feat, (c, g * g)), (1, 0))
        return self.token_proj(flat)

    def fuse(self, t1: Tensor, t2: Tensor) -> Tensor:
        """Place the two g x g grids side by side (g rows of 2g) and flatten row-major."""
        g, d = self.config.feature_grid, self.config.d_model
        a = ops.reshape(t1, (g, g, d))
        b = ops.reshape(t2, (g, g, d))
        return ops.reshape(ops.concat([a, b], axis=1), (2 * g * g, d))

    def backbone_extract(self, img1, img2) -> Tensor:
        tokens = self.fuse(self.image_tokens(img1), self.image_tokens(img2))
        return ops.add(tokens, self.token_pos)

    def encode(self, tokens: Tensor) -> Tensor:
        if tokens.shape != (self.config.token_count, self.config.d_model):
            raise ContractError(
                f"encoder expects {(self.config.token_count, self.config.d_model)} tokens, got {tokens.shape}"
            )
        x = tokens
        for layer in self.encoder:
            x = layer(x)
        return self.encoder_norm(x)

    def encode_coords(self, points) -> Tensor:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ContractError(f"query points must have shape (n, 3), got {pts.shape}")
        if pts.size and (pts.min() < 0.0 or pts.max() > 1.0):
            raise ContractError("query coordinates must lie in [0, 1]^3")
        return self.coords(Tensor(pts.astype(self.dtype)))

    def memory_cache(self, memory: Tensor):
        """Keys and values of every decoder layer, computed once per memory."""
        return [layer.cross.keys_values(memory) for layer in self.decoder]

    def decode(self, memory: Tensor, queries: Tensor, cache=None) -> Tensor:
        cache = cache or self.memory_cache(memory)
        x = queries
        for layer, kv in zip(self.decoder, cache):
            x = layer(x, kv)
        return self.decoder_norm(x)

    def mlp_head(self, features: Tensor) -> Tensor:
        return self.head(features)

    def forward(self, img1, img2, points=None) -> Tensor:
        """Block values [n_queries, B^3] for ``points`` (default: the full query grid)."""
        if points is None:
            points = query_grid(self.config.query_grid)
        memory = self.encode(self.backbone_extract(img1, img2))
        return self.mlp_head(self.decode(memory, self.encode_coords(points)))

    __call__ = forward

    def infer(self, img1, img2, chunk_size: int | None = DEFAULT_CHUNK, workers: int = 1):
        """Reconstruct the full volume; returns ``(Volume, info)`` with timing in ms."""
        cfg = self.config
        t0 = time.perf_counter()
        points = query_grid(cfg.query_grid)
        n = len(points)
        chunk = n if not chunk_size or chunk_size >= n else int(chunk_size)
        with no_grad():
            memory = self.encode(self.backbone_extract(img1, img2))
            cache = self.memory_cache(memory)

            def run(lo):
                with no_grad():
                    q = self.encode_coords(points[lo:lo + chunk])
                    return self.mlp_head(self.decode(memory, q, cache)).values

            starts = range(0, n, chunk)
            if workers > 1:
                with ThreadPoolExecutor(workers) as pool:
                    parts = list(pool.map(run, starts))
            else:
                parts = [run(lo) for lo in starts]
        blocks = np.concatenate(parts, axis=0)
        vol = Volume(assemble(blocks, cfg.query_grid, cfg.block))
        ms = (time.perf_counter() - t0) * 1e3
        return vol, {"infer_ms": ms, "query_count": n, "chunk_size": chunk}


def assemble(blocks: np.ndarray, q: int, b: int) -> np.ndarray:
    """Tile [q^3, b^3] block values (both z-major) into an (N, N, N) array, N = q*b."""
    blocks = np.asarray(blocks)
    if blocks.shape != (q ** 3, b ** 3):
        raise ContractError(f"expected {(q ** 3, b ** 3)} block values for q={q}, b={b}, got {blocks.shape}")
    n = q * b
    return blocks.reshape(q, q, q, b, b, b).transpose(0, 3, 1, 4, 2, 5).reshape(n, n, n)


def disassemble(volume: np.ndarray, q: int, b: int) -> np.ndarray:
    """Inverse of :func:`assemble`."""
    v = np.asarray(volume)
    n = q * b
    if v.shape != (n, n, n):
        raise ContractError(f"expected an ({n}, {n}, {n}) volume for q={q}, b={b}, got {v.shape}")
    return v.reshape(q, b, q, b, q, b).transpose(0, 2, 4, 1, 3, 5).reshape(q ** 3, b ** 3)

