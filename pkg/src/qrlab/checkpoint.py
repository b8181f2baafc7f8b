"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic      4 bytes   b"QRCK"
    version    uint32    CHECKPOINT_VERSION
    meta_len   uint64    length of the JSON metadata block
    meta       meta_len  UTF-8 JSON, keys sorted
    payload    ...       raw '<f8' arrays, C order, concatenated in the order
                         listed by meta["tensors"]
    crc32      uint32    zlib.crc32 of every preceding byte

``meta["tensors"]`` is a list of ``{"name", "section", "shape"}`` records.
``section`` is ``param`` for model parameters and ``adam_m`` / ``adam_v`` for
optimizer moments. The rest of the metadata (model and strategy config,
epoch, optimizer step, aliases, the run config) is free-form JSON. Nothing
time-dependent is stored, so identical runs give identical files.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError

MAGIC = b"QRCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    records = []
    blobs = []
    for section, arrays in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8", order="C")
            records.append({"name": name, "section": section, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
    meta = dict(ckpt.meta)
    meta["tensors"] = records
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = _HEADER.pack(MAGIC, CHECKPOINT_VERSION, len(meta_bytes)) + meta_bytes + b"".join(blobs)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise SchemaError(f"{path}: truncated checkpoint")
    magic, version, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise SchemaError(f"{path}: not a checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise SchemaError(f"{path}: checksum mismatch")
    start = _HEADER.size
    try:
        meta = json.loads(raw[start : start + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"{path}: unreadable metadata: {e}") from None
    offset = start + meta_len
    sections: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for rec in meta.get("tensors", []):
        shape = tuple(rec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw) - 4 or rec["section"] not in sections:
            raise SchemaError(f"{path}: tensor table does not match payload")
        sections[rec["section"]][rec["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(raw) - 4:
        raise SchemaError(f"{path}: trailing bytes after payload")
    return Checkpoint(meta, sections["param"], sections["adam_m"], sections["adam_v"])
