"""Versioned binary container for named float64 arrays plus a JSON header.

Layout (all integers little-endian)::

    magic        8 bytes  b"SEQTAG\\x00\\x01"
    version      uint16
    byte order   1 byte   b"<"
    header_len   uint32, then header_len bytes of UTF-8 JSON
    n_arrays     uint32
    per array:   name_len uint16, name (UTF-8), ndim uint8,
                 ndim x uint64 dims, float64 data in C order
    digest       32 bytes SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SEQTAG\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), b"<"]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch (file corrupted or truncated)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<H", body, pos)
    pos += 2
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if body[pos:pos + 1] != b"<":
        raise CheckpointError("unsupported byte order")
    pos += 1
    try:
        (hlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        header = json.loads(body[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from("<" + "Q" * ndim, body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return header, arrays


def save(path, header: dict, arrays: dict[str, np.ndarray], sidecar: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(dumps(header, arrays))
    if sidecar is not None:
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc
    return loads(data)
