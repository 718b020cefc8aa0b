"""Versioned binary container: JSON header + little-endian float64 payload.

All on-disk numeric artifacts (checkpoints, curvature bases, influence shards)
share this layout:

    bytes 0..7    magic b"COTPRUNE"
    bytes 8..11   uint32 LE header length in bytes
    header        UTF-8 JSON: {"format_version": 1, "kind": ..., "meta": ...,
                  "arrays": [{"name", "shape"}, ...]}
    payload       the arrays' float64 data, little-endian, C order, concatenated
                  in header order

Serialization is canonical (sorted keys, fixed separators) so identical
contents produce identical bytes, which makes file hashes usable as cache keys.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"COTPRUNE"
FORMAT_VERSION = 1


def dumps_canonical(obj) -> str:
    """Canonical JSON: sorted keys, no whitespace, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def pack(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    names = list(arrays.keys())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    head = dumps_canonical(header).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    for n in names:
        a = np.ascontiguousarray(arrays[n], dtype=np.float64)
        parts.append(a.astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def unpack(blob: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise ParseError("bad magic; not a container file")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"unreadable container header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {header.get('format_version')}")
    arrays = {}
    off = 12 + hlen
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        raw = blob[off : off + nbytes]
        if len(raw) != nbytes:
            raise ParseError(f"truncated payload for array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        off += nbytes
    return header["kind"], header["meta"], arrays


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write a container file; returns its sha256 hex digest."""
    blob = pack(kind, meta, arrays)
    with open(path, "wb") as f:
        f.write(blob)
    return hashlib.sha256(blob).hexdigest()


def read_container(path, expect_kind: str | None = None):
    with open(path, "rb") as f:
        blob = f.read()
    kind, meta, arrays = unpack(blob)
    if expect_kind is not None and kind != expect_kind:
        raise ParseError(f"expected container kind {expect_kind!r}, found {kind!r}")
    return kind, meta, arrays


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
