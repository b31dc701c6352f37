"""Binary checkpoints: magic, header length, JSON header, little-endian float64 payload.

The header holds the run config as ``key=value`` text, a manifest of
``(name, shape, offset)`` entries into the payload, and free-form extras.
Optimiser moments, when present, follow the parameters as ``adam.m.*`` and
``adam.v.*`` entries.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"STGNPPCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, arrays: "OrderedDict[str, np.ndarray]", config_text: str, extras: dict | None = None):
    manifest = []
    offset = 0
    for name, a in arrays.items():
        a = np.asarray(a, dtype=np.float64)
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
    header = json.dumps({"format_version": FORMAT_VERSION, "config": config_text,
                         "manifest": manifest, "extras": extras or {}}, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def load(path) -> tuple["OrderedDict[str, np.ndarray]", str, dict]:
    """Return ``(arrays, config_text, extras)``."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
        start = len(MAGIC) + 8
        header = json.loads(blob[start:start + hlen])
    except (struct.error, ValueError) as err:
        raise CheckpointError(f"{path}: corrupt header") from err
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = np.frombuffer(blob, dtype="<f8", offset=start + hlen)
    arrays = OrderedDict()
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        o = entry["offset"]
        if o + n > payload.size:
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arrays[entry["name"]] = payload[o:o + n].reshape(entry["shape"]).astype(np.float64)
    return arrays, header["config"], header["extras"]
