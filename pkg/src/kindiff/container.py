"""Binary artifact container: canonical JSON header + named float64 blocks.

Layout: 8-byte magic, little-endian u32 header length, UTF-8 canonical JSON,
then the raw little-endian float64 payload blocks back to back. The header
records per-section shapes/CRCs and a SHA-256 of the whole payload, so loads
validate integrity and writes are byte-reproducible for identical content.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"KDIFFBIN"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save_container(path: str | Path, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    sections = []
    payload_parts = []
    offset = 0
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f8")
        raw = arr.tobytes()
        sections.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "crc32": zlib.crc32(raw),
            }
        )
        payload_parts.append(raw)
        offset += len(raw)
    payload = b"".join(payload_parts)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "sections": sections,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ConfigError(f"{path}: not a kindiff container")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(
            f"{path}: unsupported container version {header.get('format_version')}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ConfigError(f"{path}: payload hash mismatch (file corrupted?)")
    blocks: dict[str, np.ndarray] = {}
    for sec in header["sections"]:
        shape = tuple(sec["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = payload[sec["offset"] : sec["offset"] + 8 * count]
        if zlib.crc32(raw) != sec["crc32"]:
            raise ConfigError(f"{path}: CRC mismatch in section {sec['name']!r}")
        blocks[sec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header["meta"], blocks
