"""Cone-beam digitally reconstructed radiographs.

World frame (x, y, z) in mm, origin at the isocentre (the volume centre). The
gantry rotates in the axial x-y plane. At gantry angle a the beam direction is
``e = (cos a, sin a, 0)``; the source sits at ``-SID * e`` and the detector
centre at ``(SDD - SID) * e``. Detector columns run along ``(-sin a, cos a, 0)``
and rows along +z, so projection arrays are indexed ``[row, column]``.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError
from .volume import Volume

DEFAULT_ANGLES = (45.0, 135.0)
DEFAULT_MU = 0.02
FOOTPRINT_FILL = 0.9
_RAY_CHUNK = 4096


@dataclass(frozen=True)
class ProjectionGeometry:
    angle_deg: float = 45.0
    sid_mm: float = 1000.0
    sdd_mm: float = 1500.0
    detector: tuple[int, int] = (64, 64)  # (columns U, rows V)
    pitch_mm: float | None = None          # None: fit the volume footprint
    step_mm: float | None = None           # None: half the smallest voxel spacing

    def __post_init__(self):
        if not 0 < self.sid_mm < self.sdd_mm:
            raise ConfigurationError(f"need 0 < SID < SDD, got SID={self.sid_mm}, SDD={self.sdd_mm}")
        det = tuple(int(d) for d in self.detector)
        if len(det) != 2 or min(det) < 1:
            raise ConfigurationError(f"detector extents must be two positive ints, got {self.detector}")
        object.__setattr__(self, "detector", det)
        if self.pitch_mm is not None and self.pitch_mm <= 0:
            raise ConfigurationError(f"detector pitch must be positive, got {self.pitch_mm}")
        if self.step_mm is not None and self.step_mm <= 0:
            raise ConfigurationError(f"ray-march step must be positive, got {self.step_mm}")

    @property
    def magnification(self) -> float:
        return self.sdd_mm / self.sid_mm

    def resolved(self, v: Volume) -> "ProjectionGeometry":
        """Fill in pitch and step defaults for a concrete volume."""
        pitch = self.pitch_mm
        if pitch is None:
            ext = float(np.max(v.extent_mm))
            pitch = self.magnification * ext / (FOOTPRINT_FILL * max(self.detector))
        step = self.step_mm if self.step_mm is not None else min(v.spacing) / 2.0
        return replace(self, pitch_mm=float(pitch), step_mm=float(step))

    def frame(self):
        """Source position, detector centre and the unit vectors (beam, u, v)."""
        a = math.radians(self.angle_deg)
        e = np.array([math.cos(a), math.sin(a), 0.0])
        eu = np.array([-math.sin(a), math.cos(a), 0.0])
        ev = np.array([0.0, 0.0, 1.0])
        return -self.sid_mm * e, (self.sdd_mm - self.sid_mm) * e, e, eu, ev

    def pixel_centers(self) -> np.ndarray:
        """World positions of detector pixel centres, shape (V, U, 3)."""
        if self.pitch_mm is None:
            raise ContractError("geometry pitch unresolved; call resolved(volume) first")
        _, center, _, eu, ev = self.frame()
        U, V = self.detector
        cu = (np.arange(U) + 0.5 - U / 2.0) * self.pitch_mm
        cv = (np.arange(V) + 0.5 - V / 2.0) * self.pitch_mm
        return center + cv[:, None, None] * ev + cu[None, :, None] * eu

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector"] = list(self.detector)
        return d


@dataclass(frozen=True, eq=False)
class Projection:
    """Grayscale radiograph in [0, 1], rows along z, plus its geometry."""

    pixels: np.ndarray
    geometry: ProjectionGeometry

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 2:
            raise ContractError(f"projection must be 2D, got shape {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ContractError("projection pixels must lie in [0, 1]")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "pixels", p)


def sample_points(v: Volume, pts: np.ndarray) -> np.ndarray:
    """Trilinear samples of ``v`` at world points ``pts[..., (x, y, z)]``.

    Points outside the voxel-edge bounding box read 0. Between the outermost
    voxel centres and the box faces the edge voxel value is held.
    """
    vals = v.values
    D, H, W = vals.shape
    sz, sy, sx = v.spacing
    pts = np.asarray(pts, dtype=np.float64)
    # continuous index of each coordinate, voxel centres at integers
    fx = pts[..., 0] / sx + W / 2.0 - 0.5
    fy = pts[..., 1] / sy + H / 2.0 - 0.5
    fz = pts[..., 2] / sz + D / 2.0 - 0.5
    inside = (fx >= -0.5) & (fx <= W - 0.5) & (fy >= -0.5) & (fy <= H - 0.5) & (fz >= -0.5) & (fz <= D - 0.5)
    fx = np.clip(fx, 0.0, W - 1)
    fy = np.clip(fy, 0.0, H - 1)
    fz = np.clip(fz, 0.0, D - 1)
    x0 = np.minimum(np.floor(fx).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.int64), max(H - 2, 0))
    z0 = np.minimum(np.floor(fz).astype(np.int64), max(D - 2, 0))
    x1, y1, z1 = np.minimum(x0 + 1, W - 1), np.minimum(y0 + 1, H - 1), np.minimum(z0 + 1, D - 1)
    wx, wy, wz = fx - x0, fy - y0, fz - z0
    c00 = vals[z0, y0, x0] * (1 - wx) + vals[z0, y0, x1] * wx
    c01 = vals[z0, y1, x0] * (1 - wx) + vals[z0, y1, x1] * wx
    c10 = vals[z1, y0, x0] * (1 - wx) + vals[z1, y0, x1] * wx
    c11 = vals[z1, y1, x0] * (1 - wx) + vals[z1, y1, x1] * wx
    c0 = c00 * (1 - wy) + c01 * wy
    c1 = c10 * (1 - wy) + c11 * wy
    out = c0 * (1 - wz) + c1 * wz
    return np.where(inside, out, 0.0)


def sample_trilinear(v: Volume, p) -> float:
    """Trilinear value at a single world point (x, y, z) in mm."""
    return float(sample_points(v, np.asarray(p, dtype=np.float64)[None])[0])


def ray_box(origin: np.ndarray, dirs: np.ndarray, half: np.ndarray):
    """Slab-method entry/exit parameters of rays ``origin + t * dirs`` against ``[-half, half]``.

    Returns ``(t_in, t_out)``; rays that miss have ``t_out <= t_in``.
    """
    origin = np.broadcast_to(origin, dirs.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-half - origin) * inv
        t2 = (half - origin) * inv
    tmin, tmax = np.minimum(t1, t2), np.maximum(t1, t2)
    # a ray parallel to a slab is either always or never inside it
    par = dirs == 0
    in_slab = np.abs(origin) <= half
    tmin = np.where(par, np.where(in_slab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(in_slab, np.inf, -np.inf), tmax)
    t_in = tmin.max(axis=-1)
    t_out = tmax.min(axis=-1)
    return np.maximum(t_in, 0.0), t_out


def _march(v: Volume, source: np.ndarray, dirs: np.ndarray, t_in, t_out, step: float) -> np.ndarray:
    length = np.maximum(t_out - t_in, 0.0)
    n = np.where(length > 0, np.ceil(length / step - 1e-12), 0).astype(np.int64)
    out = np.zeros(len(dirs))
    hits = np.nonzero(n)[0]
    if not hits.size:
        return out
    nmax = int(n[hits].max())
    dt = length[hits] / n[hits]
    k = np.arange(nmax) + 0.5
    t = t_in[hits, None] + k[None, :] * dt[:, None]
    pts = source + t[..., None] * dirs[hits, None, :]
    samples = sample_points(v, pts)
    samples[k[None, :] >= n[hits, None]] = 0.0
    # midpoint rule: each sample covers an equal share of the chord
    out[hits] = samples.sum(axis=1) * dt
    return out


def cast_drr(v: Volume, g: ProjectionGeometry, workers: int = 1) -> np.ndarray:
    """Line integrals (value x mm) from the source to every detector pixel, shape (V, U).

    Each ray is clipped to the volume box and sampled at the midpoints of
    equal sub-intervals no longer than ``g.step_mm``.
    """
    g = g.resolved(v)
    source, *_ = g.frame()
    pix = g.pixel_centers().reshape(-1, 3)
    dirs = pix - source
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    half = np.array([v.extent_mm[2], v.extent_mm[1], v.extent_mm[0]]) / 2.0
    t_in, t_out = ray_box(source, dirs, half)
    chunks = [slice(i, min(i + _RAY_CHUNK, len(dirs))) for i in range(0, len(dirs), _RAY_CHUNK)]

    def run(sl):
        return _march(v, source, dirs[sl], t_in[sl], t_out[sl], g.step_mm)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    U, V = g.detector
    return np.concatenate(parts).reshape(V, U)


def to_grayscale(acc: np.ndarray, geometry: ProjectionGeometry | None = None, mu: float = DEFAULT_MU) -> Projection:
    """Map line integrals through ``1 - exp(-mu * acc)`` and min-max normalize to [0, 1]."""
    att = attenuation(acc, mu)
    lo, hi = float(att.min()), float(att.max())
    img = np.zeros_like(att) if hi <= lo else (att - lo) / (hi - lo)
    return Projection(img, geometry if geometry is not None else ProjectionGeometry())


def attenuation(acc: np.ndarray, mu: float = DEFAULT_MU) -> np.ndarray:
    return -np.expm1(-mu * np.asarray(acc, dtype=np.float64))


def render(v: Volume, g: ProjectionGeometry, mu: float = DEFAULT_MU, workers: int = 1) -> Projection:
    g = g.resolved(v)
    return to_grayscale(cast_drr(v, g, workers), g, mu)


def biplanar_pair(v: Volume, angles=DEFAULT_ANGLES, geometry: ProjectionGeometry | None = None,
                  mu: float = DEFAULT_MU, workers: int = 1) -> tuple[Projection, Projection]:
    """Render two projections that share every geometry field except the gantry angle."""
    if len(angles) != 2:
        raise ConfigurationError(f"need exactly two angles, got {angles}")
    base = (geometry or ProjectionGeometry()).resolved(v)
    a, b = (render(v, replace(base, angle_deg=float(ang)), mu, workers) for ang in angles)
    return a, b


def detector_for(volume_dims, geometry: ProjectionGeometry | None = None) -> ProjectionGeometry:
    """Default geometry with a detector twice the lateral volume extent."""
    side = 2 * max(int(volume_dims[1]), int(volume_dims[2]))
    return replace(geometry or ProjectionGeometry(), detector=(side, side))


# -- export -----------------------------------------------------------------

def save_projection(p: Projection, path: str | os.PathLike, bits: int = 16, extra: dict | None = None) -> Path:
    """Write ``path`` (.png or .pgm) and a ``<path>.json`` geometry sidecar."""
    from PIL import Image

    path = Path(path)
    if bits not in (8, 16):
        raise ConfigurationError(f"bits must be 8 or 16, got {bits}")
    if path.suffix.lower() not in (".png", ".pgm"):
        raise ConfigurationError(f"projection files must be .png or .pgm, got {path.name}")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(p.pixels * maxval)
    img = Image.fromarray(q.astype(np.uint8)) if bits == 8 else Image.fromarray(q.astype(np.uint16))
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    meta = {"version": 1, "bits": bits, "shape": list(p.pixels.shape), "geometry": p.geometry.to_dict()}
    meta.update(extra or {})
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_projection(path: str | os.PathLike) -> Projection:
    from PIL import Image

    path = Path(path)
    side = path.with_name(path.name + ".json")
    try:
        meta = json.loads(side.read_text())
        geom = meta["geometry"]
        geom["detector"] = tuple(geom["detector"])
        geometry = ProjectionGeometry(**geom)
        bits = int(meta.get("bits", 16))
    except FileNotFoundError:
        raise FormatError(f"missing projection sidecar {side}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed projection sidecar {side}: {exc}") from None
    with Image.open(path) as img:
        arr = np.asarray(img).astype(np.float64)
    return Projection(arr / (255.0 if bits == 8 else 65535.0), geometry)
