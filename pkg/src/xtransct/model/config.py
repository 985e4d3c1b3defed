"""Architecture hyperparameters and the block-centre query lattice."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..errors import ConfigurationError

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    encoder_layers: int = 3
    decoder_layers: int = 3
    ff_dim: int = 256
    image_size: int = 64
    stem_channels: int = 8
    stem_stride: int = 1
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    query_grid: int = 8
    block: int = 4
    head_hidden: int = 256
    head_layers: int = 3
    pos_std: float = 0.02
    init_seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(int(c) for c in self.backbone_channels))

    @property
    def output_size(self) -> int:
        """Voxels per axis of the reconstructed volume."""
        return self.query_grid * self.block

    @property
    def total_stride(self) -> int:
        return self.stem_stride * 2 ** len(self.backbone_channels)

    @property
    def feature_grid(self) -> int:
        """Side of each image's feature grid; fused tokens form a g x 2g grid."""
        return self.image_size // self.total_stride

    @property
    def token_count(self) -> int:
        return 2 * self.feature_grid ** 2

    @property
    def query_count(self) -> int:
        return self.query_grid ** 3

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def problems(self) -> list[str]:
        out = []
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            out.append(f"d_model ({self.d_model}) must be divisible by heads ({self.heads})")
        for name in ("encoder_layers", "decoder_layers"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if self.query_grid < 1 or self.block < 1:
            out.append(f"query_grid ({self.query_grid}) and block ({self.block}) must be >= 1")
        if self.stem_stride not in (1, 2):
            out.append(f"stem_stride must be 1 or 2, got {self.stem_stride}")
        if not self.backbone_channels:
            out.append("backbone_channels must list at least one stage")
        if self.image_size % self.total_stride or self.image_size < self.total_stride:
            out.append(
                f"image_size {self.image_size} is not a multiple of the backbone stride {self.total_stride}"
            )
        if self.dtype not in DTYPES:
            out.append(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.head_layers < 1 or self.head_hidden < 1 or self.ff_dim < 1:
            out.append("head_layers, head_hidden and ff_dim must be >= 1")
        return out

    def validate(self) -> "ModelConfig":
        probs = self.problems()
        if probs:
            raise ConfigurationError("invalid model config:\n  " + "\n  ".join(probs))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {unknown}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), **kw})


FULL_SCALE = ModelConfig(
    d_model=256, heads=8, encoder_layers=6, decoder_layers=6, ff_dim=1024, image_size=128,
    stem_channels=32, stem_stride=2, backbone_channels=(64, 128, 256), query_grid=32, block=4,
)


def query_grid(q: int, dtype=np.float64) -> np.ndarray:
    """Centres of a uniform q x q x q partition of [0, 1]^3 as (x, y, z) rows.

    Rows are in z-major raster order: row ``(i * q + j) * q + k`` is the block
    with z index i, y index j and x index k.
    """
    c = (np.arange(q, dtype=np.float64) + 0.5) / q
    zi, yi, xi = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([xi.ravel(), yi.ravel(), zi.ravel()], axis=1).astype(dtype)
