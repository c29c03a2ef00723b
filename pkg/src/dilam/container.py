"""Versioned binary container shared by every persisted artifact.

Layout (all integers little-endian)::

    magic        8 bytes   b"DILAMBIN"
    version      uint32
    header_len   uint64
    header       JSON (utf-8): {"kind", "meta", "arrays": [{name, shape, offset, nbytes}]}
    payload      concatenated little-endian float32 blobs
    digest       32 bytes  sha256 of everything above

Checkpoints, activation statistics, affine banks and task classifiers all
use this layout; they differ only in ``kind`` and the array names.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ContainerError, CorruptFileError, TruncatedFileError, VersionMismatchError

MAGIC = b"DILAMBIN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_LEN = 32
_BLOB_DTYPE = np.dtype("<f4")


def encode(kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype=_BLOB_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"kind": kind, "meta": dict(meta or {}), "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(raw: bytes, expect_kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(raw) < _PREFIX.size:
        raise TruncatedFileError(f"file is {len(raw)} bytes, shorter than the fixed prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptFileError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"container version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(raw) < start + header_len:
        raise TruncatedFileError("file ends inside the header")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable header: {exc}") from exc
    payload_start = start + header_len
    payload_len = sum(e["nbytes"] for e in header["arrays"])
    expected = payload_start + payload_len + _DIGEST_LEN
    if len(raw) < expected:
        raise TruncatedFileError(f"file is {len(raw)} bytes, header promises {expected}")
    if len(raw) > expected:
        raise CorruptFileError(f"{len(raw) - expected} trailing bytes after digest")
    body = raw[:expected - _DIGEST_LEN]
    if hashlib.sha256(body).digest() != raw[expected - _DIGEST_LEN:]:
        raise CorruptFileError("payload digest mismatch")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise ContainerError(f"expected a {expect_kind!r} container, found {header['kind']!r}")
    arrays = {}
    for e in header["arrays"]:
        lo = payload_start + e["offset"]
        arr = np.frombuffer(raw, dtype=_BLOB_DTYPE, count=e["nbytes"] // 4, offset=lo)
        arrays[e["name"]] = arr.astype(np.float32).reshape(e["shape"])
    return arrays, header["meta"]


def write(path, kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> int:
    """Write atomically; returns the number of bytes written."""
    data = encode(kind, arrays, meta)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


def read(path, expect_kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode(raw, expect_kind)


def payload_bytes(arrays: Mapping[str, np.ndarray]) -> int:
    """Bytes the arrays occupy as float32 blobs, excluding header and digest."""
    return sum(int(np.size(a)) * _BLOB_DTYPE.itemsize for a in arrays.values())
