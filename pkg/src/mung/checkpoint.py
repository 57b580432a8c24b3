"""MUNG1 checkpoint files.

Layout::

    b"MUNG1"
    uint32 little-endian  manifest length in bytes
    manifest              UTF-8 JSON: {"meta": {...}, "params": [{"name", "shape", "offset"}, ...]}
    payload               little-endian float64 arrays, row-major, offsets in bytes from payload start
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MUNG1"


class CheckpointError(ValueError):
    pass


def encode(params: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"meta": meta or {}, "params": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a MUNG1 checkpoint (bad magic)")
    pos = len(MAGIC)
    (mlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    manifest = json.loads(blob[pos: pos + mlen].decode("utf-8"))
    payload = memoryview(blob)[pos + mlen:]
    params = {}
    for e in manifest["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        if start + 8 * count > len(payload):
            raise CheckpointError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(payload[start: start + 8 * count], dtype="<f8").reshape(e["shape"])
        params[e["name"]] = arr.astype(np.float64)
    return params, manifest.get("meta", {})


def save(path, params: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a checkpoint and return its SHA-256."""
    blob = encode(params, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def params_digest(params: dict[str, np.ndarray]) -> str:
    """SHA-256 of the serialized parameter payload (metadata excluded)."""
    return hashlib.sha256(encode(params)).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
