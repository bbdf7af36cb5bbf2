"""PCT1 tensor files and deterministic zip bundles.

PCT1 layout: 4-byte magic ``PCT1``, u8 dtype tag (0=f32, 1=f64), u8 rank,
rank little-endian u32 extents, then the raw little-endian payload. Used for
checkpoints, datasets and golden files.

Bundles are zip archives of PCT1 entries plus a ``meta.json``; entry order
and timestamps are fixed so identical content yields identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zipfile

import numpy as np

MAGIC = b"PCT1"
_DTYPE_TAG = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_TAG_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TAG:
        raise ValueError(f"PCT1 stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank exceeds PCT1 limit")
    head = MAGIC + struct.pack("<BB", _DTYPE_TAG[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a PCT1 tensor (bad magic)")
    tag, rank = struct.unpack_from("<BB", buf, 4)
    if tag not in _TAG_DTYPE:
        raise ValueError(f"unknown PCT1 dtype tag {tag}")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    dtype = _TAG_DTYPE[tag]
    start = 6 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    expected = start + count * dtype.itemsize
    if len(buf) != expected:
        raise ValueError(f"PCT1 payload size mismatch: {len(buf)} != {expected}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, arr: np.ndarray) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(tensor_to_bytes(arr))
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


def write_bundle(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Atomically write a zip of PCT1 entries plus meta.json, byte-stable."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=2))
        for name in sorted(tensors):
            info = zipfile.ZipInfo(f"{name}.pct1", date_time=_ZIP_EPOCH)
            zf.writestr(info, tensor_to_bytes(tensors[name]))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def read_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path, "r") as zf:
        names = zf.namelist()
        if "meta.json" not in names:
            raise ValueError(f"{path}: bundle has no meta.json")
        meta = json.loads(zf.read("meta.json"))
        tensors = {}
        for name in names:
            if name.endswith(".pct1"):
                tensors[name[: -len(".pct1")]] = tensor_from_bytes(zf.read(name))
    return meta, tensors
