"""Checkpoint container: JSON manifest plus raw little-endian payloads.

The same format stores policy and compressor parameters. Layout:

    magic "LMCK0001" | u32 header length | manifest JSON | payload bytes

The manifest maps each array name to shape, dtype and byte offset into the
payload region. Values are float64 by default; float32 storage is allowed
for size (training always recomputes in float64).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactError

MAGIC = b"LMCK0001"
_DTYPES = {"f8": "<f8", "f4": "<f4"}


def save_arrays(path, arrays: dict[str, np.ndarray], dtype: str = "f8") -> None:
    if dtype not in _DTYPES:
        raise ArtifactError(f"unsupported checkpoint dtype {dtype!r}")
    np_dtype = np.dtype(_DTYPES[dtype])
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np_dtype)
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload += arr.tobytes()
    header = json.dumps({"entries": entries}, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ArtifactError(f"bad checkpoint magic in {path}")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(blob[start : start + hlen])
    payload = blob[start + hlen :]
    out = {}
    for e in header["entries"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = arr.astype(np.float64)
    return out


def digest_arrays(arrays: dict[str, np.ndarray]) -> str:
    """Content digest over names, shapes and exact float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def load_json(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"artifact not found: {path}")
    return json.loads(path.read_text())
