"""Binary checkpoint format.

Layout (little endian)::

    b"PTTSCKPT" | u32 header_bytes | JSON header | f32 payload

The header names every array with its shape and element offset into the
payload, and carries the training step, config hash and free-form metadata.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTTSCKPT"


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, arrays: dict[str, np.ndarray], step: int, arch_hash: str,
                    metadata: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    header = json.dumps({"step": step, "config_hash": arch_hash, "metadata": metadata or {},
                         "arrays": entries}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(header)) + header)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)


def load_checkpoint(path, expected_hash: str | None = None):
    """Return ``(arrays, step, config_hash, metadata)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12: 12 + hlen])
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CheckpointError(
            f"{path}: architecture hash {header['config_hash']} != expected {expected_hash}")
    payload = np.frombuffer(raw[12 + hlen:], dtype="<f4")
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + n > payload.size:
            raise CheckpointError(f"{path}: truncated at {e['name']}")
        arrays[e["name"]] = payload[e["offset"]: e["offset"] + n].reshape(e["shape"]).copy()
    return arrays, header["step"], header["config_hash"], header["metadata"]
