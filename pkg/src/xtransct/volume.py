"""Volumes, masks, intensity normalization, resampling and the ``.vol`` file format.

Arrays are indexed (z, y, x) with z the slice axis. World coordinates are in
millimetres with the volume centre at the origin (the isocentre).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError

FORMAT_VERSION = 1
DEFAULT_HU_WINDOW = (-1000.0, 400.0)


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Normalized attenuation field in [0, 1] with per-axis spacing in mm."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype.kind != "f":
            v = v.astype(np.float32)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ContractError(f"volume needs three positive extents, got shape {v.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ContractError(f"spacing must be three positive numbers, got {self.spacing}")
        if not np.isfinite(v).all():
            raise ContractError("volume contains non-finite values")
        lo, hi = float(v.min()), float(v.max())
        if lo < 0.0 or hi > 1.0:
            raise ContractError(f"volume values must lie in [0, 1], got [{lo}, {hi}]")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def extent_mm(self) -> np.ndarray:
        """Physical size (z, y, x) of the voxel grid, edge to edge."""
        return np.asarray(self.dims, dtype=np.float64) * np.asarray(self.spacing)

    def voxel_centers_mm(self, axis: int) -> np.ndarray:
        n = self.dims[axis]
        return (np.arange(n) + 0.5 - n / 2.0) * self.spacing[axis]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class SegMask:
    """Binary mask aligned with a volume."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ContractError(f"mask must be 3D, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ContractError("mask values must be 0 or 1")
        object.__setattr__(self, "values", _frozen(v.astype(np.uint8)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def count(self) -> int:
        return int(self.values.sum(dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, SegMask):
            return NotImplemented
        return np.array_equal(self.values, other.values)


def normalize_hu(raw: np.ndarray, window: tuple[float, float] = DEFAULT_HU_WINDOW,
                 spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Clamp Hounsfield units to ``window`` and map it linearly onto [0, 1]."""
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ConfigurationError(f"HU window needs lo < hi, got ({lo}, {hi})")
    raw = np.asarray(raw, dtype=np.float64)
    out = (np.clip(raw, lo, hi) - lo) / (hi - lo)
    return Volume(out, spacing)


def _interp_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    # sample at output voxel centres expressed in input index space
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = pos - i0
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1 - w) + np.take(a, i1, axis=axis) * w


def resample(v: Volume, dims: tuple[int, int, int]) -> Volume:
    """Trilinear resampling on normalized voxel-centre coordinates.

    The physical extent is preserved, so spacing scales with the dims ratio.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigurationError(f"target dims must be three positive ints, got {dims}")
    a = v.values.astype(np.float64)
    for axis in range(3):
        a = _interp_axis(a, axis, dims[axis])
    spacing = tuple(s * n / m for s, n, m in zip(v.spacing, v.dims, dims))
    # convex combinations of [0, 1] values; clip only guards rounding
    return Volume(np.clip(a, 0.0, 1.0).astype(v.values.dtype), spacing)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_volume(v: Volume | SegMask, path: str | os.PathLike, spacing=None) -> Path:
    """Write raw little-endian float32 data plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    if isinstance(v, SegMask):
        values, kind = v.values, "mask"
        spacing = spacing or (1.0, 1.0, 1.0)
    else:
        values, kind = v.values, "volume"
        spacing = v.spacing
    meta = {
        "dims": list(values.shape),
        "spacing_mm": [float(s) for s in spacing],
        "value_range": [0, 1],
        "kind": kind,
        "version": FORMAT_VERSION,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def _read_raw(path: Path) -> tuple[np.ndarray, dict]:
    side = _sidecar(path)
    try:
        meta = json.loads(side.read_text())
    except FileNotFoundError:
        raise FormatError(f"missing sidecar {side}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed sidecar {side}: {exc.msg} at byte offset {exc.pos}") from None
    dims = meta.get("dims") if isinstance(meta, dict) else None
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise FormatError(f"malformed sidecar {side}: 'dims' must be three positive integers, got {dims!r}")
    if meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported volume format version {meta.get('version')!r} in {side}")
    payload = path.read_bytes()
    expected = 4 * int(np.prod(dims))
    if len(payload) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for dims {dims} float32, found {len(payload)} "
            f"(payload ends at byte offset {len(payload)})"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return values, meta


def load_volume(path: str | os.PathLike) -> Volume:
    values, meta = _read_raw(Path(path))
    spacing = meta.get("spacing_mm", [1.0, 1.0, 1.0])
    if not (isinstance(spacing, list) and len(spacing) == 3):
        raise FormatError(f"malformed sidecar for {path}: 'spacing_mm' must list three numbers")
    return Volume(values, tuple(spacing))


def load_mask(path: str | os.PathLike) -> SegMask:
    values, _ = _read_raw(Path(path))
    return SegMask(values)
