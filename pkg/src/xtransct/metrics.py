"""Image-quality and overlap metrics on normalized volumes.

SSIM uses a uniform 7^3 window over fully contained positions only
(population statistics), with C1 = (0.01 L)^2 and C2 = (0.03 L)^2 for L = 1.
PSNR uses MAX = 1 and returns ``math.inf`` for identical inputs; reports
serialize that as the string ``"inf"``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ContractError
from .volume import SegMask, Volume

SSIM_WINDOW = 7
DEFAULT_CAVITY_BAND = (0.0, 0.2)
REPORT_VERSION = 1


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    a, b = _arr(x), _arr(y)
    if a.shape != b.shape:
        raise ContractError(f"dims mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(x, y) -> float:
    a, b = _pair(x, y)
    return float(np.mean((a - b) ** 2))


def psnr(x, y, max_value: float = 1.0) -> float:
    """10 log10(MAX^2 / MSE) in dB; ``inf`` when the inputs are identical."""
    err = mse(x, y)
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(max_value ** 2 / err))


def _box_mean(a: np.ndarray, w: int) -> np.ndarray:
    """Mean over every fully contained w^k window (valid positions only)."""
    out = ndimage.uniform_filter(a, size=w, mode="constant")
    lo = w // 2
    hi = lo - (w - 1)
    return out[tuple(slice(lo, a.shape[i] + hi) for i in range(a.ndim))]


def _ssim_map(a: np.ndarray, b: np.ndarray, window: int, data_range: float) -> np.ndarray:
    if min(a.shape) < window:
        raise ContractError(f"SSIM window {window} larger than input extent {a.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _box_mean(a, window), _box_mean(b, window)
    vx = _box_mean(a * a, window) - mx * mx
    vy = _box_mean(b * b, window) - my * my
    cxy = _box_mean(a * b, window) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(x, y, window: int = SSIM_WINDOW, data_range: float = 1.0, per_slice: bool = False) -> float:
    """Mean local SSIM over a sliding cubic window, or square windows per axial slice."""
    a, b = _pair(x, y)
    if per_slice:
        return float(np.mean([_ssim_map(a[k], b[k], window, data_range).mean() for k in range(a.shape[0])]))
    return float(_ssim_map(a, b, window, data_range).mean())


def _binary(m, what: str) -> np.ndarray:
    a = np.asarray(getattr(m, "values", m))
    if not np.isin(a, (0, 1)).all():
        raise ContractError(f"{what} must be binary")
    return a.astype(bool)


def dice(a, b) -> float:
    """2 TP / (2 TP + FP + FN); two empty masks score 1."""
    x, y = _binary(a, "first mask"), _binary(b, "second mask")
    if x.shape != y.shape:
        raise ContractError(f"dims mismatch: {x.shape} vs {y.shape}")
    tp = int(np.count_nonzero(x & y))
    fp = int(np.count_nonzero(~x & y))
    fn = int(np.count_nonzero(x & ~y))
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def threshold_seg(v, band=DEFAULT_CAVITY_BAND, exclude_border: bool = False,
                  largest_components: int | None = None) -> SegMask:
    """Mask voxels whose value lies in ``band`` (inclusive).

    A scalar ``band`` means ``[band, 1]``. With ``exclude_border`` any
    connected component touching the volume boundary is dropped, which removes
    the air surrounding the body. ``largest_components`` keeps only the k
    largest remaining components.
    """
    if np.isscalar(band):
        band = (float(band), 1.0)
    lo, hi = float(band[0]), float(band[1])
    if not (0.0 <= lo <= 1.0 and 0.0 <= hi <= 1.0) or hi < lo:
        raise ConfigurationError(f"threshold band must be a non-empty interval within [0, 1], got {band}")
    a = _arr(v)
    mask = (a >= lo) & (a <= hi)
    if exclude_border or largest_components:
        labels, n = ndimage.label(mask)
        keep = np.ones(n + 1, dtype=bool)
        keep[0] = False
        if exclude_border and n:
            faces = np.concatenate([labels[[0, -1]].ravel(), labels[:, [0, -1]].ravel(), labels[:, :, [0, -1]].ravel()])
            keep[np.unique(faces)] = False
            keep[0] = False
        if largest_components and n:
            sizes = np.bincount(labels.ravel(), minlength=n + 1)
            sizes[~keep] = 0
            order = np.argsort(sizes[1:])[::-1][:largest_components] + 1
            top = np.zeros_like(keep)
            top[order] = keep[order]
            keep = top
        mask = keep[labels]
    return SegMask(mask.astype(np.uint8))


@dataclass
class SampleMetrics:
    sample_id: str
    ssim: float
    psnr_db: float
    dice: float
    infer_ms: float = 0.0


def _mean_std(xs: Sequence[float]) -> dict:
    arr = np.asarray(xs, dtype=np.float64)
    if np.isinf(arr).all():
        return {"mean": "inf", "std": 0.0}
    if np.isinf(arr).any():
        return {"mean": "inf", "std": "nan"}
    return {"mean": float(arr.mean()), "std": float(arr.std())}


@dataclass
class MetricReport:
    samples: list[SampleMetrics]
    config: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.samples)

    def aggregate(self) -> dict:
        cols = {k: [getattr(s, k) for s in self.samples] for k in ("ssim", "psnr_db", "dice", "infer_ms")}
        return {k: _mean_std(v) for k, v in cols.items()}

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, "sample_count": self.count, **self.aggregate(), "config": self.config}

    def write(self, json_path: str | os.PathLike, csv_path: str | os.PathLike | None = None) -> None:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        if csv_path is not None:
            write_sample_csv(self.samples, csv_path)


def write_sample_csv(samples: Iterable[SampleMetrics], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "ssim", "psnr_db", "dice", "infer_ms"])
        for s in samples:
            # repr() round-trips floats exactly and spells infinity "inf"
            w.writerow([s.sample_id, repr(s.ssim), repr(s.psnr_db), repr(s.dice), repr(s.infer_ms)])


def read_sample_csv(path: str | os.PathLike) -> list[SampleMetrics]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [SampleMetrics(r["sample_id"], float(r["ssim"]), float(r["psnr_db"]), float(r["dice"]),
                          float(r["infer_ms"])) for r in rows]


def score(sample_id: str, truth: Volume, pred: Volume, truth_mask: SegMask,
          band=DEFAULT_CAVITY_BAND, infer_ms: float = 0.0) -> SampleMetrics:
    pred_mask = threshold_seg(pred, band, exclude_border=True)
    return SampleMetrics(sample_id, ssim(truth, pred), psnr(truth, pred), dice(truth_mask, pred_mask), infer_ms)


def evaluate(model, samples, band=DEFAULT_CAVITY_BAND, chunk_size: int | None = 512) -> MetricReport:
    """Reconstruct every sample with ``model`` and score it against its ground truth.

    ``samples`` yields objects with ``name``, ``volume``, ``mask`` and a
    ``projections()`` method returning the two input images.
    """
    rows = []
    for s in samples:
        p1, p2 = s.projections()
        pred, info = model.infer(p1, p2, chunk_size=chunk_size)
        rows.append(score(s.name, s.volume, pred, s.mask, band, info["infer_ms"]))
    cfg = {"model": model.config.to_dict(), "band": list(band), "ssim_window": SSIM_WINDOW, "psnr_max": 1.0}
    return MetricReport(rows, cfg)
