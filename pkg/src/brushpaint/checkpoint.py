"""Binary checkpoint container.

Layout::

    b"BRUSHCKP"                     8-byte magic
    uint64 little-endian            length N of the JSON header in bytes
    N bytes                         UTF-8 JSON header
    payload                         float64 little-endian arrays, back to back

The header holds ``schema_version``, ``kind``, the config echo, free-form
``meta`` and a ``tensors`` list of ``{name, shape, offset, nbytes}`` where
``offset`` counts from the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError

MAGIC = b"BRUSHCKP"
CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    schema_version: int = CHECKPOINT_SCHEMA_VERSION


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, payload, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        # asarray keeps 0-d shapes; tobytes always emits C order
        arr = np.asarray(ckpt.arrays[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "schema_version": ckpt.schema_version,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(payload)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC:
        raise SchemaError("not a checkpoint file (bad magic)")
    if len(blob) < len(MAGIC) + 8:
        raise SchemaError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"corrupt checkpoint header: {exc}") from exc
    version = header.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise SchemaError(f"checkpoint schema_version {version} unsupported (want {CHECKPOINT_SCHEMA_VERSION})")
    base = start + n
    arrays = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(blob):
            raise SchemaError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=lo)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return Checkpoint(header["kind"], arrays, header.get("config", {}), header.get("meta", {}), version)


def save(path: str | Path, ckpt: Checkpoint) -> str:
    """Write atomically; returns the SHA-256 of the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = to_bytes(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise SchemaError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def array_digest(arr: np.ndarray) -> str:
    a = np.asarray(arr, dtype="<f8")
    return hashlib.sha256(repr(a.shape).encode() + a.tobytes()).hexdigest()
