"""Binary container for tensors, shared by backbone/checkpoint/compression/store files.

Layout:
    8 bytes   magic "CMMR0001"
    8 bytes   u64 little-endian length of the JSON metadata block
    N bytes   UTF-8 JSON: {version, role, tensors: [{name, shape, offset}], hashes, ...}
    payload   raw little-endian IEEE-754 binary32 tensors, offsets relative to
              payload start, in sorted-name order
    32 bytes  SHA-256 of everything preceding it

Writes are atomic (tmp file + fsync + rename) so a store update is durable
before it is acknowledged.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError

MAGIC = b"CMMR0001"
FORMAT_VERSION = 1


@dataclass
class Container:
    role: str
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)


def tensor_dict_hash(tensors: dict[str, np.ndarray]) -> str:
    """SHA-256 over float32 tensor bytes in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return h.hexdigest()


def write_container(path, role: str, tensors: dict[str, np.ndarray],
                    metadata: dict | None = None, hashes: dict | None = None) -> None:
    names = sorted(tensors)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    meta = {
        "version": FORMAT_VERSION,
        "role": role,
        "tensors": entries,
        "hashes": dict(hashes or {}),
        "meta": dict(metadata or {}),
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    body = MAGIC + struct.pack("<Q", len(meta_bytes)) + meta_bytes + b"".join(blobs)
    digest = hashlib.sha256(body).digest()

    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(body)
        f.write(digest)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_container(path) -> Container:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 8 + 32:
        raise IntegrityError(f"{path}: truncated container")
    if raw[:8] != MAGIC:
        raise IntegrityError(f"{path}: bad magic {raw[:8]!r}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: SHA-256 mismatch, file corrupt or tampered")
    (meta_len,) = struct.unpack("<Q", raw[8:16])
    meta_end = 16 + meta_len
    if meta_end > len(body):
        raise IntegrityError(f"{path}: metadata length exceeds file size")
    meta = json.loads(body[16:meta_end].decode("utf-8"))
    if meta.get("version") != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported container version {meta.get('version')}")
    payload = body[meta_end:]
    tensors = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise IntegrityError(f"{path}: tensor {entry['name']!r} overruns payload")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return Container(role=meta["role"], tensors=tensors,
                     metadata=meta.get("meta", {}), hashes=meta.get("hashes", {}))
