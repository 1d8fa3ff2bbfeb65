"""Named-tensor manifest files used for checkpoints and VGG weights.

Layout (all integers little-endian)::

    bytes 0..7    magic b"DMFNMAN1"
    bytes 8..15   uint64 header length H
    bytes 16..16+H  UTF-8 JSON header
    remaining     payload: raw little-endian tensor bytes, concatenated

The header is::

    {
      "meta": {...},                       # free-form JSON metadata
      "tensors": [{"name": str, "dtype": "float32" | "float64" | "int64" | ...,
                   "shape": [int, ...], "offset": int, "nbytes": int}, ...],
      "payload_sha256": hex digest of the whole payload
    }

Offsets are relative to the start of the payload; tensors appear in header order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"DMFNMAN1"

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "float16": (torch.float16, np.dtype("<f2")),
    "int64": (torch.int64, np.dtype("<i8")),
    "int32": (torch.int32, np.dtype("<i4")),
    "uint8": (torch.uint8, np.dtype("u1")),
    "bool": (torch.bool, np.dtype("?")),
}
_BY_TORCH = {v[0]: k for k, v in _DTYPES.items()}


class ManifestError(IOError):
    """A manifest file is unreadable, corrupt or does not match expectations."""


def tensor_bytes(t: torch.Tensor) -> bytes:
    name = _BY_TORCH.get(t.dtype)
    if name is None:
        raise ManifestError(f"unsupported dtype {t.dtype}")
    return t.detach().cpu().contiguous().numpy().astype(_DTYPES[name][1], copy=False).tobytes()


def save_manifest(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> str:
    """Write tensors atomically (temp file + rename). Returns the payload digest."""
    entries, chunks, offset = [], [], 0
    digest = hashlib.sha256()
    for name, t in tensors.items():
        raw = tensor_bytes(t)
        entries.append({"name": name, "dtype": _BY_TORCH[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        digest.update(raw)
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries, "payload_sha256": digest.hexdigest()},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for c in chunks:
                f.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return digest.hexdigest()


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def _read_header(f, path) -> dict:
    if f.read(8) != MAGIC:
        raise ManifestError(f"{path}: not a tensor manifest (bad magic)")
    raw_len = f.read(8)
    if len(raw_len) != 8:
        raise ManifestError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw_len)
    try:
        return json.loads(f.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: corrupt header ({e})") from e


def load_manifest(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    """Read and integrity-check a manifest. Returns ``(tensors, meta)``."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise ManifestError(f"cannot open {path}: {e}") from e
    with f:
        header = _read_header(f, path)
        payload = f.read()
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ManifestError(f"{path}: payload checksum mismatch (file corrupt or truncated)")
    out = {}
    for e in header["tensors"]:
        tdtype, npdtype = _DTYPES[e["dtype"]]
        buf = payload[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=npdtype).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(npdtype.newbyteorder("="), copy=True)).to(tdtype)
    return out, header.get("meta", {})


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def state_checksum(tensors: Mapping[str, torch.Tensor]) -> str:
    """Digest over names, shapes and values, independent of storage."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(tensor_bytes(t))
    return h.hexdigest()


def load_into(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str = "") -> None:
    """Copy named tensors into ``module``'s state, failing on the first mismatch by name."""
    own = module.state_dict()
    for name, target in own.items():
        key = prefix + name
        if key not in tensors:
            raise ManifestError(f"missing parameter {key!r}")
        src = tensors[key]
        if tuple(src.shape) != tuple(target.shape):
            raise ManifestError(
                f"shape mismatch for parameter {key!r}: checkpoint {tuple(src.shape)} vs model {tuple(target.shape)}"
            )
    with torch.no_grad():
        for name, target in own.items():
            target.copy_(tensors[prefix + name].to(target.dtype))
