"""Binary tensor container and checkpoint files.

Container layout, all little-endian: 8 magic bytes, rank as uint64, each
extent as uint64, then the data as float64 in row-major order. A checkpoint
is a sequence of containers plus a JSON manifest mapping each name to its
byte offset and shape.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping

import numpy as np

MAGIC = b"MSCLTNS\x01"


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array) -> int:
    """Write one container; returns the number of bytes written."""
    arr = np.array(array, dtype="<f8", order="C")
    header = MAGIC + struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    fh.write(header)
    fh.write(arr.tobytes(order="C"))
    return len(header) + arr.nbytes


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    (rank,) = struct.unpack("<Q", fh.read(8))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError("truncated tensor data")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def manifest_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict = None) -> None:
    entries = {}
    offset = 0
    with open(path, "wb") as fh:
        for name, value in tensors.items():
            arr = np.asarray(getattr(value, "data", value))
            entries[name] = {"offset": offset, "shape": list(arr.shape)}
            offset += write_tensor(fh, arr)
    doc = {"format": "muscle-checkpoint", "entries": entries}
    if meta:
        doc["meta"] = meta
    manifest_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    doc = json.loads(manifest_path(path).read_text(encoding="utf-8"))
    out = {}
    with open(path, "rb") as fh:
        for name, entry in doc["entries"].items():
            fh.seek(entry["offset"])
            arr = read_tensor(fh)
            if list(arr.shape) != entry["shape"]:
                raise FormatError(f"{name}: manifest shape {entry['shape']} != stored {list(arr.shape)}")
            out[name] = arr
    return out


def checkpoint_meta(path) -> dict:
    return json.loads(manifest_path(path).read_text(encoding="utf-8")).get("meta", {})
