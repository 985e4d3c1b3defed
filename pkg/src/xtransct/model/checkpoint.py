"""Checkpoint container.

Layout: 8-byte magic ``XTCKPT01``, an unsigned 64-bit little-endian header
length, the UTF-8 JSON header, then every parameter as little-endian float32
in manifest order. The header records the model config, a manifest of
``{name, shape, offset, count}`` entries (offsets in bytes from the start of
the payload), the training step, the stage flag and the payload size.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .config import ModelConfig

MAGIC = b"XTCKPT01"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    step: int = 0
    stage: int = 1
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, step: int = 0, stage: int = 1, **extra) -> "Checkpoint":
        return cls(model.config, model.state_dict(), step, stage, extra)

    def build_model(self, dtype: str | None = None):
        from .network import XTransCT

        cfg = self.config if dtype is None else self.config.replace(dtype=dtype)
        model = XTransCT(cfg)
        model.load_state_dict(self.params, dtype=cfg.np_dtype)
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    manifest, chunks, offset = [], [], 0
    for name, arr in ckpt.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "count": int(np.size(arr))})
        chunks.append(data)
        offset += len(data)
    header = {
        "version": VERSION,
        "config": ckpt.config.to_dict(),
        "params": manifest,
        "step": int(ckpt.step),
        "stage": int(ckpt.stage),
        "payload_bytes": offset,
        "extra": ckpt.extra,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise FormatError(f"{path}: header claims {hlen} bytes but file has {len(blob) - 16} after the prefix")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from None
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    payload = blob[16 + hlen:]
    expected = int(header["payload_bytes"])
    declared = 4 * sum(int(p["count"]) for p in header["params"])
    if len(payload) != expected or declared != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected} "
            f"(manifest sums to {declared})"
        )
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for p in header["params"]:
        start, n = int(p["offset"]), int(p["count"])
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=start)
        params[p["name"]] = arr.reshape(p["shape"]).astype(np.float32)
    cfg = ModelConfig.from_dict(header["config"])
    return Checkpoint(cfg, params, int(header["step"]), int(header["stage"]), header.get("extra", {}))
