"""Binary checkpoint format: JSON header with a tensor manifest, then a
payload of concatenated little-endian float32 buffers.

Layout: 8-byte magic, uint32 little-endian header length, UTF-8 JSON header,
payload bytes. The manifest records name/shape/byte_offset/byte_length per
tensor; offsets must be non-overlapping and inside the payload. Round-trips
are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import ParamStore

MAGIC = b"MFABCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(store: ParamStore, path: str | Path, arch: dict | None = None) -> None:
    names = sorted(store.params)
    manifest = []
    offset = 0
    buffers = []
    for name in names:
        data = np.asarray(store.params[name].data, dtype="<f4")
        raw = data.tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(data.shape),
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        buffers.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "arch": arch or {},
        "manifest": manifest,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(header_bytes)).tobytes())
        fh.write(header_bytes)
        for raw in buffers:
            fh.write(raw)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = np.frombuffer(fh.read(4), dtype="<u4")
        raw = fh.read(int(hlen))
        if len(raw) != hlen:
            raise CheckpointError(f"{path}: truncated header")
        return json.loads(raw.decode("utf-8"))


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    """Load a checkpoint; returns (store, arch). Validates version, manifest
    consistency and payload length before accepting anything."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = np.frombuffer(fh.read(4), dtype="<u4")
        raw = fh.read(int(hlen))
        if len(raw) != hlen:
            raise CheckpointError(f"{path}: truncated header")
        header = json.loads(raw.decode("utf-8"))
        payload = fh.read()

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version!r}")
    manifest = header.get("manifest")
    if not isinstance(manifest, list):
        raise CheckpointError(f"{path}: missing manifest")

    spans = []
    for entry in manifest:
        off, length = entry["byte_offset"], entry["byte_length"]
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        if length != expected:
            raise CheckpointError(
                f"{path}: manifest entry {entry['name']!r} length {length} != shape size {expected}"
            )
        if off < 0 or off + length > len(payload):
            raise CheckpointError(
                f"{path}: manifest entry {entry['name']!r} spans outside payload"
            )
        spans.append((off, off + length, entry["name"]))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"{path}: overlapping manifest entries {n0!r} and {n1!r}")

    store = ParamStore()
    for entry in manifest:
        off, length = entry["byte_offset"], entry["byte_length"]
        arr = np.frombuffer(payload[off : off + length], dtype="<f4").reshape(entry["shape"])
        store.add(entry["name"], arr.copy())
    return store, header.get("arch", {})
