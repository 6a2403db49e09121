"""Versioned binary container for trained models.

Layout (all integers little-endian)::

    magic      8 bytes   b"FTNCKPT\\0"
    version    uint32
    meta_len   uint64    followed by meta_len bytes of UTF-8 JSON
    count      uint32    number of tensors, then for each tensor:
        name_len uint16, name (UTF-8)
        ndim     uint8,  ndim x uint64 shape
        data     prod(shape) little-endian float64 values

The JSON metadata carries the model config, mode names, node grids, grid
shape and the normalisation state, which is everything needed to rebuild
the model around the stored parameters.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .data import NormalizationState
from .errors import ConfigError, FTNError
from .model import FusionTransNet, ModeSpec

MAGIC = b"FTNCKPT\0"
VERSION = 1
_F64 = np.dtype("<f8")


class CheckpointError(FTNError, ValueError):
    """Malformed or truncated checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unknown format version."""


def save_checkpoint(
    path: str | Path,
    model: FusionTransNet,
    normalization: NormalizationState,
    extra: dict | None = None,
) -> None:
    meta = {
        "config": model.config.to_dict(),
        "modes": [
            {"name": m.name, "grids": [list(g) for g in m.grids], "num_features": m.num_features}
            for m in model.modes
        ],
        "grid_shape": list(model.grid_shape) if model.grid_shape else None,
        "node_volume": [v.tolist() for v in model.node_volume] if model.node_volume else None,
        "normalization": normalization.to_dict(),
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob]
    arrays = model.state_arrays()
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype=_F64)
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw metadata and named tensors."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(raw, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic header)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(size * 8), dtype=_F64).reshape(shape).astype(np.float64)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return meta, arrays


def load_checkpoint(path: str | Path) -> tuple[FusionTransNet, NormalizationState, dict]:
    """Rebuild the model and its normalisation; returns (model, normalization, extra)."""
    meta, arrays = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(meta["config"])
        modes = [
            ModeSpec(m["name"], [tuple(g) for g in m["grids"]], int(m["num_features"]))
            for m in meta["modes"]
        ]
        grid_shape = tuple(meta["grid_shape"]) if meta.get("grid_shape") else None
        volume = meta.get("node_volume")
        volume = [np.asarray(v, dtype=np.float64) for v in volume] if volume else None
        normalization = NormalizationState.from_dict(meta["normalization"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete metadata: {exc}") from None
    model = FusionTransNet(config, modes, grid_shape, volume)
    try:
        model.load_state_arrays(arrays)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model, normalization, meta.get("extra", {})
