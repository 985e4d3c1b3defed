"""Mid-slice montages (axial, coronal, sagittal) written as PNG."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

VIEWS = ("axial", "coronal", "sagittal")


def mid_slices(v) -> list[np.ndarray]:
    a = np.asarray(getattr(v, "values", v))
    nz, ny, nx = a.shape
    # flip so superior is up in the coronal and sagittal views
    return [a[nz // 2], a[:, ny // 2][::-1], a[:, :, nx // 2][::-1]]


def save_montage(path: str | os.PathLike, rows: dict, title: str | None = None, dpi: int = 100) -> Path:
    """One row of three mid-slices per entry of ``rows`` (label -> volume), gray scale on [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(len(rows), 3, figsize=(7.5, 2.6 * len(rows)), squeeze=False)
    for r, (label, vol) in enumerate(rows.items()):
        for c, (view, sl) in enumerate(zip(VIEWS, mid_slices(vol))):
            ax = axes[r, c]
            ax.imshow(sl, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(view, fontsize=9)
            if c == 0:
                ax.set_ylabel(label, fontsize=9)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)
    return path
