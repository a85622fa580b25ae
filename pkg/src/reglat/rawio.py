"""Single-file binary container: 4-byte magic, little-endian u32 header
length, JSON header, raw payload. Used for checkpoints and latent matrices."""

from __future__ import annotations

import json
import struct
from pathlib import Path

MAGIC = b"RGLT"
CONTAINER_VERSION = 1


class ContainerError(Exception):
    """Corrupt or incompatible container file."""


def write_container(path: str | Path, header: dict, payload: bytes) -> None:
    doc = dict(header)
    doc["container_version"] = CONTAINER_VERSION
    doc["payload_bytes"] = len(payload)
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)


def read_container(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ContainerError(f"{path}: unreadable header: {e}") from None
    if header.get("container_version") != CONTAINER_VERSION:
        raise ContainerError(f"{path}: unsupported container version")
    payload = raw[8 + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise ContainerError(
            f"{path}: payload is {len(payload)} bytes, "
            f"header declares {header.get('payload_bytes')}"
        )
    return header, payload
