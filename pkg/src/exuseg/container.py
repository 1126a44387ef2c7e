"""Binary tensor container used by checkpoints and patch archives.

Layout, all little-endian:

    magic(4) | format_version(u32) | manifest_len(u64) | manifest JSON |
    raw tensor payload | crc32(u32, over every preceding byte)

The manifest records ``meta`` (arbitrary JSON from the caller) and a
tensor table of (name, dtype, shape, offset); offsets are relative to the
payload start. Writes are atomic (tmp file + rename) and reads verify the
checksum before parsing, so truncation or bit flips surface as
ContainerError instead of garbage tensors.
"""
from __future__ import annotations

import json
import os
import zlib

import numpy as np

from .errors import ContainerError, VersionError

FORMAT_VERSION = 1

MAGIC_CHECKPOINT = b"EXSG"
MAGIC_PATCHSET = b"EXPS"

# dtypes allowed in archives; everything is stored little-endian
_DTYPES = {"<f8", "<f4", "<i8", "<i4", "<u4", "|u1"}


def _canonical_dtype(arr: np.ndarray) -> str:
    kind = arr.dtype.kind + str(arr.dtype.itemsize)
    by_kind = {
        "f8": "<f8", "f4": "<f4",
        "i8": "<i8", "i4": "<i4",
        "u4": "<u4", "u1": "|u1",
    }
    if kind not in by_kind:
        raise ContainerError(f"unsupported tensor dtype {arr.dtype}")
    return by_kind[kind]


def write_container(path, magic: bytes, meta: dict, tensors: dict) -> None:
    """Serialize ``meta`` and named tensors to ``path`` atomically."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype = _canonical_dtype(arr)
        raw = arr.astype(np.dtype(dtype), copy=False).tobytes()
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)

    manifest = json.dumps(
        {"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    body = bytearray()
    body += magic
    body += FORMAT_VERSION.to_bytes(4, "little")
    body += len(manifest).to_bytes(8, "little")
    body += manifest
    for raw in chunks:
        body += raw
    body += (zlib.crc32(bytes(body)) & 0xFFFFFFFF).to_bytes(4, "little")

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(body))
    os.replace(tmp, path)


def read_container(path, magic: bytes):
    """Load (meta, tensors) from ``path``, verifying magic, version, CRC."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 + 4 + 8 + 4:
        raise ContainerError(f"{path}: file too short to be an archive")
    if blob[:4] != magic:
        raise ContainerError(
            f"{path}: bad magic {blob[:4]!r}, expected {magic!r}"
        )
    stored_crc = int.from_bytes(blob[-4:], "little")
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ContainerError(
            f"{path}: checksum mismatch (stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}); file is corrupt or truncated"
        )
    version = int.from_bytes(blob[4:8], "little")
    if version > FORMAT_VERSION:
        raise VersionError(
            f"{path}: format version {version} is newer than supported "
            f"version {FORMAT_VERSION}"
        )
    manifest_len = int.from_bytes(blob[8:16], "little")
    manifest_end = 16 + manifest_len
    if manifest_end > len(blob) - 4:
        raise ContainerError(f"{path}: manifest length exceeds file size")
    try:
        manifest = json.loads(blob[16:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: manifest is not valid JSON: {e}") from None

    payload = blob[manifest_end:-4]
    tensors = {}
    for entry in manifest["tensors"]:
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise ContainerError(f"{path}: unsupported dtype {dtype!r} in manifest")
        shape = tuple(int(e) for e in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        start = int(entry["offset"])
        if start + nbytes > len(payload):
            raise ContainerError(
                f"{path}: tensor {entry['name']!r} extends past payload end"
            )
        n_elem = nbytes // np.dtype(dtype).itemsize
        arr = np.frombuffer(payload, dtype=np.dtype(dtype), count=n_elem, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return manifest["meta"], tensors
