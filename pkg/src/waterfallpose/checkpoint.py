"""Checkpoint persistence: JSON manifest plus one little-endian binary blob.

The manifest lists (name, shape, dtype, offset, nbytes, crc32) per tensor in
write order with a config snapshot; offsets are contiguous. Every tensor is
CRC-32 checked on load, so any single-byte corruption is detected and the
save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import CheckpointError, ChecksumError, VersionError

FORMAT_VERSION = 1
_DTYPE_TAGS = {"f32": "<f4", "f64": "<f8"}


def _paths(path: Path | str) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix == ".json":
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def save_checkpoint(path: Path | str, tensors: Dict[str, np.ndarray],
                    config: dict, precision: str):
    if precision not in _DTYPE_TAGS:
        raise CheckpointError(f"unknown precision {precision!r}")
    tag = _DTYPE_TAGS[precision]
    manifest_path, blob_path = _paths(path)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr).astype(tag).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": precision,
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "precision": precision,
        "config": config,
        "tensors": entries,
    }
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path: Path | str) -> Tuple[dict, Dict[str, np.ndarray]]:
    manifest_path, blob_path = _paths(path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    if not blob_path.exists():
        raise FileNotFoundError(f"checkpoint blob not found: {blob_path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint format version {version!r} "
                           f"(expected {FORMAT_VERSION})")
    blob = blob_path.read_bytes()
    tensors: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for e in manifest["tensors"]:
        if e["offset"] != expected_offset:
            raise CheckpointError(f"non-contiguous offset for tensor '{e['name']}'")
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"blob truncated at tensor '{e['name']}'")
        if zlib.crc32(raw) != e["crc32"]:
            raise ChecksumError(f"CRC mismatch for tensor '{e['name']}'")
        tag = _DTYPE_TAGS.get(e["dtype"])
        if tag is None:
            raise CheckpointError(f"unknown dtype {e['dtype']!r} for tensor '{e['name']}'")
        arr = np.frombuffer(raw, dtype=tag).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.dtype(tag).newbyteorder("=")).copy()
        expected_offset += e["nbytes"]
    if expected_offset != len(blob):
        raise CheckpointError(
            f"blob has {len(blob)} bytes, manifest accounts for {expected_offset}")
    return manifest, tensors


def describe_checkpoint(path: Path | str) -> str:
    manifest, tensors = load_checkpoint(path)
    lines = [f"format_version: {manifest['format_version']}",
             f"precision: {manifest['precision']}",
             f"tensors: {len(tensors)}"]
    total = 0
    for e in manifest["tensors"]:
        shape = "x".join(str(s) for s in e["shape"]) or "scalar"
        lines.append(f"  {e['name']:<60} {shape:<16} {e['nbytes']:>10} bytes "
                     f"crc32={e['crc32']:#010x}")
        total += e["nbytes"]
    lines.append(f"total blob bytes: {total}")
    return "\n".join(lines)
