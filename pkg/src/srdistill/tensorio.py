"""Portable tensor archive: a deterministic, dependency-free container format.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
(sorted keys), then the raw array payloads concatenated in header order.
Writing the same arrays always produces the same bytes, which makes
checkpoint round trips byte-stable and easy to checksum.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"SRTA\x00\x01\x00\x00"


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> str:
    """Write named arrays to `path`; returns the sha256 hex digest of the file."""
    entries = {}
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = arr.tobytes()  # always C-order, regardless of input strides
        entries[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payloads)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_tensors(path: str | Path, expect_sha256: str | None = None) -> dict[str, np.ndarray]:
    """Read an archive back into a dict of arrays, verifying the checksum if given."""
    blob = Path(path).read_bytes()
    if expect_sha256 is not None:
        digest = hashlib.sha256(blob).hexdigest()
        if digest != expect_sha256:
            raise IntegrityError(f"checksum mismatch for {path}: {digest} != {expect_sha256}")
    if blob[: len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path} is not a tensor archive (bad magic)")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    try:
        entries = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path} has a corrupt header: {exc}") from exc
    base = 16 + header_len
    out = {}
    for name, meta in entries.items():
        start = base + meta["offset"]
        stop = start + meta["nbytes"]
        if stop > len(blob):
            raise IntegrityError(f"{path}: payload for {name!r} is truncated")
        arr = np.frombuffer(blob[start:stop], dtype=np.dtype(meta["dtype"]))
        out[name] = arr.reshape(meta["shape"]).copy()
    return out
