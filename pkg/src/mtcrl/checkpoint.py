"""Flat binary checkpoints.

Layout: the magic ``MTCCKPT1`` followed by records of
``u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f64 payload`` (all
little-endian, payload row-major).  An optional architecture manifest rides
along as a rank-0 record whose name is ``@manifest `` + JSON.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"MTCCKPT1"
MANIFEST_PREFIX = "@manifest "


class CheckpointError(ValueError):
    pass


def save(path, arrays: "dict[str, np.ndarray]", manifest: dict | None = None) -> None:
    records = list(arrays.items())
    if manifest is not None:
        records.insert(0, (MANIFEST_PREFIX + json.dumps(manifest, sort_keys=True), np.zeros(())))
    chunks = [MAGIC]
    for name, arr in records:
        arr = np.asarray(arr, dtype="<f8")  # keeps rank 0; tobytes below is C order anyway
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load(path) -> tuple["OrderedDict[str, np.ndarray]", dict | None]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an MTC checkpoint")
    pos = 8
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    manifest = None
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
            if name.startswith(MANIFEST_PREFIX):
                manifest = json.loads(name[len(MANIFEST_PREFIX):])
            else:
                arrays[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return arrays, manifest


def check_manifest(found: dict | None, expected: dict) -> None:
    """Raise unless every key of ``expected`` matches the stored manifest."""
    if found is None:
        raise CheckpointError("checkpoint carries no architecture manifest")
    bad = {k: (found.get(k), v) for k, v in expected.items() if found.get(k) != v}
    if bad:
        raise CheckpointError(f"incompatible checkpoint: {bad}")
