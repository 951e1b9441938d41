"""Binary container shared by dataset, checkpoint and forecast files.

Layout::

    magic (fixed bytes, newline terminated)
    uint64 LE   header length in bytes
    header      UTF-8 JSON, keys sorted
    blobs       float64 little-endian arrays, concatenated in header order
    32 bytes    SHA-256 over everything before it

The header lists every array as ``{"name", "shape", "offset"}`` with offsets
relative to the start of the blob section.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Mapping

import numpy as np

CHECKSUM_ALGORITHM = "sha256"
_DIGEST = 32


class CorruptFileError(ValueError):
    """Magic mismatch, truncation or checksum failure."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def encode(magic: bytes, header: dict, arrays: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = dict(header)
    header["arrays"] = entries
    header["checksum"] = CHECKSUM_ALGORITHM
    hbytes = canonical_json(header).encode("utf-8")
    body = magic + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def write(path, magic: bytes, header: dict, arrays: Mapping[str, np.ndarray]) -> None:
    data = encode(magic, header, arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _parse_prefix(buf: bytes, magic: bytes, path) -> tuple[dict, int]:
    if buf[: len(magic)] != magic:
        raise CorruptFileError(f"{path}: bad magic bytes")
    pos = len(magic)
    if len(buf) < pos + 8:
        raise CorruptFileError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", buf[pos: pos + 8])
    pos += 8
    if len(buf) < pos + hlen:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(buf[pos: pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from None
    return header, pos + hlen


def read_header(path, magic: bytes) -> dict:
    """Read only the JSON header, without touching the array blobs."""
    with open(path, "rb") as fh:
        prefix = fh.read(len(magic) + 8)
        if prefix[: len(magic)] != magic:
            raise CorruptFileError(f"{path}: bad magic bytes")
        if len(prefix) < len(magic) + 8:
            raise CorruptFileError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<Q", prefix[len(magic):])
        hbytes = fh.read(hlen)
    if len(hbytes) < hlen:
        raise CorruptFileError(f"{path}: truncated header")
    return _parse_prefix(prefix + hbytes, magic, path)[0]


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    header, start = _parse_prefix(buf, magic, path)
    if len(buf) < start + _DIGEST:
        raise CorruptFileError(f"{path}: truncated file")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFileError(f"{path}: checksum mismatch")
    arrays = {}
    blob = body[start:]
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        lo = entry["offset"]
        if lo + n > len(blob):
            raise CorruptFileError(f"{path}: array {entry['name']} truncated")
        arrays[entry["name"]] = np.frombuffer(blob[lo: lo + n], dtype="<f8").reshape(shape).astype(np.float64)
    return header, arrays
