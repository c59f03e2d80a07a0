"""MTLK container: named float64 arrays plus a JSON header, written atomically.

Layout (all integers little-endian)::

    b"MTLK" | u32 version | i64 seed | u32 header_len | header JSON (utf-8)
    | array payloads, float64 LE, in header order | u64 body_len | u32 crc32(body)

``body`` is everything before the trailer. The header holds ``kind``, the
config echo and the ``(name, shape)`` table.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MTLK"
VERSION = 1
_PRE = struct.Struct("<4sIqI")
_TRAILER = struct.Struct("<QI")


@dataclass
class Artifact:
    kind: str
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    seed: int = 0


def encode(art: Artifact) -> bytes:
    table = []
    chunks = []
    for name, arr in art.arrays.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        table.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    header = json.dumps({"kind": art.kind, "config": art.config, "arrays": table},
                        sort_keys=True, separators=(",", ":")).encode()
    body = _PRE.pack(MAGIC, VERSION, int(art.seed), len(header)) + header + b"".join(chunks)
    return body + _TRAILER.pack(len(body), zlib.crc32(body))


def decode(blob: bytes) -> Artifact:
    if len(blob) < _PRE.size + _TRAILER.size:
        raise FormatError("file too short to be an MTLK container")
    magic, version, seed, hlen = _PRE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError("bad magic: not an MTLK file")
    if version != VERSION:
        raise FormatError(f"unsupported MTLK version {version} (this build reads {VERSION})")
    body_len, crc = _TRAILER.unpack_from(blob, len(blob) - _TRAILER.size)
    if body_len != len(blob) - _TRAILER.size:
        raise FormatError(f"length mismatch: trailer says {body_len} body bytes, file has {len(blob) - _TRAILER.size}")
    body = blob[:body_len]
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch: file is corrupted")
    pos = _PRE.size
    try:
        header = json.loads(body[pos : pos + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    pos += hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + n > body_len:
            raise FormatError(f"array {entry['name']!r} runs past the end of the file")
        arrays[entry["name"]] = np.frombuffer(body, dtype="<f8", count=n // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += n
    if pos != body_len:
        raise FormatError("trailing bytes after the array table")
    return Artifact(header["kind"], arrays, header["config"], seed)


def save(path: str | os.PathLike, art: Artifact) -> None:
    """Write via a temp file in the same directory and rename, so readers never see a partial file."""
    path = Path(path)
    blob = encode(art)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | os.PathLike, kind: str | None = None) -> Artifact:
    with open(path, "rb") as fh:
        art = decode(fh.read())
    if kind is not None and art.kind != kind:
        raise FormatError(f"{path}: expected a {kind!r} artifact, found {art.kind!r}")
    return art


def write_text_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
