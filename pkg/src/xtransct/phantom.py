"""Synthetic chest-like phantoms used in place of clinical CT.

Random draws come from numpy's Philox generator, a counter-based bit
generator whose output stream is fixed by the integer seed on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .volume import SegMask, Volume

KINDS = ("nested-ellipsoids", "spheres", "cube-lattice")
KIND_ALIASES = {"nested": "nested-ellipsoids", "lattice": "cube-lattice", "cubes": "cube-lattice"}
MIN_DIM = 8

DEFAULT_DENSITIES = {
    "body": (0.3, 0.5),
    "cavity": (0.05, 0.15),
    "shell": (0.8, 1.0),
    "sphere": (0.2, 1.0),
    "cube": (1.0, 1.0),
}


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "nested-ellipsoids"
    dims: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    densities: dict = field(default_factory=dict)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # cube-lattice: cubes per axis and cube side in voxels (None = half a cell)
    lattice: int = 1
    cube_size: int | None = None
    n_spheres: int = 4

    def __post_init__(self):
        kind = KIND_ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ConfigurationError(f"unknown phantom kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        dims = (self.dims,) * 3 if isinstance(self.dims, int) else tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < MIN_DIM:
            raise ConfigurationError(f"phantom dims must be >= {MIN_DIM} per axis, got {dims}")
        object.__setattr__(self, "dims", dims)
        merged = dict(DEFAULT_DENSITIES)
        merged.update({k: tuple(float(x) for x in v) for k, v in self.densities.items()})
        for name, (lo, hi) in merged.items():
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigurationError(f"density range for {name!r} must satisfy 0 <= lo <= hi <= 1, got {(lo, hi)}")
        object.__setattr__(self, "densities", merged)
        if self.lattice < 1:
            raise ConfigurationError("lattice must be >= 1")


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned ellipsoid in normalized coordinates: each axis spans [-1, 1]."""

    center: tuple[float, float, float]  # (z, y, x)
    radii: tuple[float, float, float]
    density: float

    def contains(self, zz, yy, xx):
        c, r = self.center, self.radii
        return ((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 + ((xx - c[2]) / r[2]) ** 2 <= 1.0


@dataclass(frozen=True)
class NestedLayout:
    body: Ellipsoid
    inner: Ellipsoid  # body minus the high-density shell
    shell_density: float
    cavities: tuple[Ellipsoid, Ellipsoid]


def normalized_grid(dims):
    """Voxel-centre coordinates in [-1, 1] per axis, broadcastable to ``dims``."""
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in dims]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def _draw(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def nested_layout(spec: PhantomSpec) -> NestedLayout:
    """Sample the structure parameters of a nested-ellipsoids phantom."""
    rng = rng_from_seed(spec.seed)
    dens = spec.densities
    jit = lambda a: float(rng.uniform(-a, a))  # noqa: E731
    body_r = (0.80 + jit(0.05), 0.62 + jit(0.05), 0.82 + jit(0.05))
    body_c = (jit(0.03), jit(0.03), jit(0.03))
    body = Ellipsoid(body_c, body_r, _draw(rng, dens["body"]))
    # shell thickness in voxels, converted to normalized units per axis
    t_vox = max(1.5, min(spec.dims) / 16.0)
    inner_r = tuple(r - 2.0 * t_vox / n for r, n in zip(body_r, spec.dims))
    inner = Ellipsoid(body_c, inner_r, body.density)
    shell_density = _draw(rng, dens["shell"])
    cavities = []
    for side in (-1.0, 1.0):
        r = (0.55 * inner_r[0] * (1 + jit(0.08)), 0.55 * inner_r[1] * (1 + jit(0.08)),
             0.30 * inner_r[2] * (1 + jit(0.08)))
        c = (body_c[0] + jit(0.04), body_c[1] + jit(0.04), body_c[2] + side * 0.45 * inner_r[2])
        cavities.append(Ellipsoid(c, r, _draw(rng, dens["cavity"])))
    return NestedLayout(body, inner, shell_density, tuple(cavities))


def _nested(spec: PhantomSpec):
    lay = nested_layout(spec)
    zz, yy, xx = normalized_grid(spec.dims)
    vol = np.zeros(spec.dims, dtype=np.float32)
    in_body = lay.body.contains(zz, yy, xx)
    in_inner = lay.inner.contains(zz, yy, xx)
    vol[in_body] = lay.body.density
    vol[in_body & ~in_inner] = lay.shell_density
    mask = np.zeros(spec.dims, dtype=np.uint8)
    for cav in lay.cavities:
        inside = cav.contains(zz, yy, xx)
        vol[inside] = cav.density
        mask |= inside.astype(np.uint8)
    return vol, mask


def _spheres(spec: PhantomSpec):
    rng = rng_from_seed(spec.seed)
    zz, yy, xx = normalized_grid(spec.dims)
    vol = np.zeros(spec.dims, dtype=np.float32)
    mask = np.zeros(spec.dims, dtype=np.uint8)
    for _ in range(spec.n_spheres):
        r = float(rng.uniform(0.15, 0.35))
        c = tuple(float(x) for x in rng.uniform(-0.9 + r, 0.9 - r, size=3))
        inside = Ellipsoid(c, (r, r, r), 0.0).contains(zz, yy, xx)
        vol[inside] = _draw(rng, spec.densities["sphere"])
        mask[inside] = 1
    return vol, mask


def _cube_lattice(spec: PhantomSpec):
    rng = rng_from_seed(spec.seed)
    vol = np.zeros(spec.dims, dtype=np.float32)
    mask = np.zeros(spec.dims, dtype=np.uint8)
    n = spec.lattice
    cells = [d // n for d in spec.dims]
    side = spec.cube_size if spec.cube_size is not None else max(1, min(cells) // 2)
    if side > min(cells):
        raise ConfigurationError(f"cube_size {side} exceeds lattice cell size {min(cells)}")
    for idx in np.ndindex(n, n, n):
        lo = [i * c + (c - side) // 2 for i, c in zip(idx, cells)]
        sl = tuple(slice(a, a + side) for a in lo)
        vol[sl] = _draw(rng, spec.densities["cube"])
        mask[sl] = 1
    return vol, mask


def make_phantom(spec: PhantomSpec) -> tuple[Volume, SegMask]:
    """Rasterize a phantom and its ground-truth mask (cavities, spheres or cubes)."""
    builder = {"nested-ellipsoids": _nested, "spheres": _spheres, "cube-lattice": _cube_lattice}[spec.kind]
    vol, mask = builder(spec)
    return Volume(vol, spec.spacing), SegMask(mask)
