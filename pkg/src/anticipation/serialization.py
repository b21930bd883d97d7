"""TNS1 tensor files and named-tensor checkpoints.

A TNS1 block is ``b"TNS1"``, the rank as little-endian uint32, one uint32 per
extent, then the values as little-endian float32 in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import DataError

MAGIC = b"TNS1"


def write_tns(stream: BinaryIO, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    stream.write(MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.tobytes(order="C"))


def read_tns(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(4)
    if magic != MAGIC:
        raise DataError(f"bad TNS1 magic {magic!r}")
    (rank,) = struct.unpack("<I", stream.read(4))
    shape = struct.unpack(f"<{rank}I", stream.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    raw = stream.read(4 * count)
    if len(raw) != 4 * count:
        raise DataError(f"truncated TNS1 block: expected {4 * count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def save_tns(path, array) -> None:
    with open(path, "wb") as fh:
        write_tns(fh, array)


def load_tns(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tns(fh)


def save_named(directory, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``manifest.json`` plus one ``<name>.tns`` per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        save_tns(directory / f"{name}.tns", arr)
        entries.append({"name": name, "shape": list(np.shape(arr))})
    manifest = dict(meta, parameters=entries)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_named(directory) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    tensors = {}
    for entry in manifest["parameters"]:
        arr = load_tns(directory / f"{entry['name']}.tns")
        if list(arr.shape) != entry["shape"]:
            raise DataError(f"{entry['name']}: manifest shape {entry['shape']} but file holds {list(arr.shape)}")
        tensors[entry["name"]] = arr
    return manifest, tensors
