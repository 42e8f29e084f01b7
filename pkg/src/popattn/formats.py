"""Binary container used by every float artifact.

Layout::

    bytes 0..11   magic (12 ASCII bytes naming the artifact kind)
    bytes 12..15  format version, uint32 little-endian
    JSON header   compact, sorted keys, terminated by a single newline
    payload       little-endian float32 values, row-major

The header always carries ``"dtype": "f32le"`` and ``"count"`` (number of
floats in the payload); readers check the payload size against it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

VERSION = 1
MAGIC_FEATURES = b"POPATTN-FEAT"
MAGIC_CHECKPOINT = b"POPATTN-CKPT"
MAGIC_LDA = b"POPATTN-LDAM"
PREFIX_LEN = 16

_F32LE = np.dtype("<f4")


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_container(path, magic: bytes, header: dict, payload: np.ndarray) -> None:
    assert len(magic) == 12
    flat = np.ascontiguousarray(payload, dtype=_F32LE).reshape(-1)
    head = dict(header, dtype="f32le", count=int(flat.size))
    blob = magic + struct.pack("<I", VERSION) + dumps_json(head).encode("utf-8") + b"\n" + flat.tobytes()
    Path(path).write_bytes(blob)


def read_container(path, magic: bytes) -> tuple[dict, np.ndarray]:
    """Return ``(header, flat float32 payload)``; raises FormatError on any defect."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < PREFIX_LEN:
        raise FormatError(f"{path}: {len(raw)} bytes, shorter than the {PREFIX_LEN}-byte prefix")
    if raw[:12] != magic:
        raise FormatError(f"{path}: bad magic {raw[:12]!r} at offset 0, expected {magic!r}")
    (version,) = struct.unpack("<I", raw[12:16])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 12")
    nl = raw.find(b"\n", PREFIX_LEN)
    if nl < 0:
        raise FormatError(f"{path}: header starting at offset {PREFIX_LEN} has no terminating newline")
    try:
        header = json.loads(raw[PREFIX_LEN:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable JSON header at offsets {PREFIX_LEN}..{nl}: {exc}") from None
    if header.get("dtype") != "f32le":
        raise FormatError(f"{path}: dtype {header.get('dtype')!r}, expected 'f32le'")
    start = nl + 1
    expected = int(header.get("count", -1)) * 4
    actual = len(raw) - start
    if expected < 0 or actual != expected:
        raise FormatError(
            f"{path}: payload at byte offset {start} holds {actual} bytes, header promises "
            f"{expected} (file should end at offset {start + expected}, ends at {len(raw)})"
        )
    return header, np.frombuffer(raw, dtype=_F32LE, offset=start).astype(np.float32)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
