"""Binary model checkpoints.

Layout (little-endian)::

    b"LMDC" | u32 version | u32 manifest_len | manifest JSON | f64 blob | u32 crc32

The trailing CRC covers every preceding byte.  The manifest also carries a
CRC per tensor so corruption can be localised.
"""

from __future__ import annotations

import json
import struct
import zlib
from typing import Dict, Optional, Tuple

import numpy as np

from ..datagen import _atomic_write
from ..diffcore import ModelState, ShapeError, Tensor

MAGIC = b"LMDC"
VERSION = 1
_HEADER = struct.Struct("<4sII")


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


def encode_checkpoint(state: ModelState, meta: Optional[dict] = None) -> bytes:
    """Serialise ``state`` plus free-form ``meta`` (stage, seed, config hash, ...)."""
    tensors, chunks, offset = [], [], 0
    for name, t in state.named_tensors().items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset,
                        "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": VERSION, "ema_momentum": state.ema_momentum,
                "meta": meta or {}, "tensors": tensors}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = _HEADER.pack(MAGIC, VERSION, len(mbytes)) + mbytes + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def _split_state(arrays: Dict[str, np.ndarray], ema_momentum: float) -> ModelState:
    groups = {"enc": {}, "cls": {}, "t_enc": {}, "t_cls": {}}
    for name, arr in arrays.items():
        teacher = name.startswith("teacher.")
        base = name[len("teacher."):] if teacher else name
        key = ("t_" if teacher else "") + base.split(".", 1)[0]
        if key not in groups:
            raise CheckpointError(f"unexpected tensor {name!r}")
        groups[key][base] = Tensor(arr, requires_grad=not teacher, name=base)
    return ModelState(groups["enc"], groups["cls"], groups["t_enc"], groups["t_cls"],
                      ema_momentum)


def _locate_damage(blob: bytes) -> CheckpointError:
    """Best-effort description of where a CRC failure sits."""
    try:
        _, _, mlen = _HEADER.unpack_from(blob, 0)
        manifest = json.loads(blob[_HEADER.size:_HEADER.size + mlen])
        data_start = _HEADER.size + mlen
        for t in manifest["tensors"]:
            lo = data_start + t["offset"]
            if zlib.crc32(blob[lo:lo + t["nbytes"]]) != t["crc32"]:
                return CheckpointError(f"CRC mismatch in tensor {t['name']!r}", lo)
        return CheckpointError("CRC mismatch in trailer", len(blob) - 4)
    except (ValueError, KeyError, TypeError, struct.error):
        return CheckpointError("CRC mismatch in header or manifest", 0)


def decode_checkpoint(blob: bytes) -> Tuple[ModelState, dict]:
    if len(blob) < _HEADER.size + 4:
        raise CheckpointError(f"file too short: {len(blob)} bytes", len(blob))
    magic, version, mlen = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    (stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != stored:
        raise _locate_damage(blob)
    start = _HEADER.size
    try:
        manifest = json.loads(blob[start:start + mlen])
        data_start = start + mlen
        expected = data_start + sum(t["nbytes"] for t in manifest["tensors"]) + 4
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"manifest unreadable: {exc}", start) from exc
    if len(blob) != expected:
        raise CheckpointError(f"length {len(blob)} does not match manifest ({expected})",
                              min(len(blob), expected))
    arrays = {}
    for t in manifest["tensors"]:
        lo = data_start + t["offset"]
        raw = blob[lo:lo + t["nbytes"]]
        if int(np.prod(t["shape"])) * 8 != t["nbytes"]:
            raise CheckpointError(f"tensor {t['name']!r} shape disagrees with its size", lo)
        arrays[t["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t["shape"])
    return _split_state(arrays, float(manifest["ema_momentum"])), manifest["meta"]


def check_compatible(state: ModelState, like: ModelState) -> None:
    """Raise ``ShapeError`` naming the first tensor whose shape differs."""
    ours, theirs = state.named_tensors(), like.named_tensors()
    for name, t in theirs.items():
        if name not in ours:
            raise ShapeError(f"checkpoint lacks tensor {name!r}")
        if ours[name].shape != t.shape:
            raise ShapeError(f"tensor {name!r}: checkpoint shape {ours[name].shape} "
                             f"!= expected {t.shape}")


def save_checkpoint(state: ModelState, path: str, meta: Optional[dict] = None) -> None:
    _atomic_write(path, encode_checkpoint(state, meta))


def load_checkpoint(path: str, like: Optional[ModelState] = None) -> Tuple[ModelState, dict]:
    """Load ``(state, meta)``; with ``like`` also verify the architecture."""
    with open(path, "rb") as fh:
        state, meta = decode_checkpoint(fh.read())
    if like is not None:
        check_compatible(state, like)
    return state, meta


__all__ = ["CheckpointError", "check_compatible", "decode_checkpoint", "encode_checkpoint",
           "load_checkpoint", "save_checkpoint"]

