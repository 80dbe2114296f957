"""Portable on-disk tensor format plus checkpoint bundles.

A ``.dslt`` file is: magic ``DSLT``, u16 version, u8 dtype code (0 = float32,
1 = float64, 2 = int64), u8 rank, rank * u64 dims, then the raw element
payload.  Everything is little-endian and row-major, so files written on one
machine load anywhere.

A checkpoint is a directory of ``.dslt`` files plus a ``manifest.json``
mapping logical parameter names to files and carrying small scalar state.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSLT"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1, "i8": 2}


class TensorFormatError(ValueError):
    """Raised when a tensor file or checkpoint bundle is malformed."""


def _dtype_code(dtype):
    dtype = np.dtype(dtype)
    key = dtype.kind + str(dtype.itemsize)
    if key not in _CODE_FOR_KIND:
        raise TensorFormatError(f"unsupported dtype {dtype} (use float32/float64/int64)")
    return _CODE_FOR_KIND[key]


def save_tensor(path, array):
    array = np.asarray(array)
    code = _dtype_code(array.dtype)
    if array.ndim > 255:
        raise TensorFormatError("rank too large")
    header = MAGIC + struct.pack("<HBB", VERSION, code, array.ndim)
    dims = np.asarray(array.shape, dtype="<u8").tobytes()
    payload = np.ascontiguousarray(array).astype(_DTYPE_CODES[code], copy=False).tobytes()
    Path(path).write_bytes(header + dims + payload)


def load_tensor(path):
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: not a tensor file (bad magic)")
    version, code, rank = struct.unpack("<HBB", blob[4:8])
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported tensor file version {version}")
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    head = 8 + 8 * rank
    if len(blob) < head:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}Q", blob[8:head]) if rank else ()
    dtype = _DTYPE_CODES[code]
    expect = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = np.frombuffer(blob, dtype=dtype, offset=head)
    if payload.size != expect:
        raise TensorFormatError(
            f"{path}: payload holds {payload.size} elements, header promises {expect}"
        )
    native = dtype.newbyteorder("=")
    return payload.astype(native, copy=True).reshape(dims)


def _slug(name):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def save_bundle(dirpath, arrays, extra=None):
    """Write named arrays as one .dslt file each plus a manifest."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    entries = {}
    used = set()
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        fname = _slug(name) + ".dslt"
        if fname in used:
            raise TensorFormatError(f"bundle name collision after sanitising: {fname}")
        used.add(fname)
        save_tensor(dirpath / fname, arr)
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)}
    manifest = {"format": "densedet-bundle", "version": VERSION, "tensors": entries,
                "extra": extra or {}}
    (dirpath / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_bundle(dirpath):
    """Read a bundle back; returns (dict of arrays, extra dict)."""
    dirpath = Path(dirpath)
    mpath = dirpath / "manifest.json"
    if not mpath.is_file():
        raise TensorFormatError(f"{dirpath}: no manifest.json, not a checkpoint bundle")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise TensorFormatError(f"{mpath}: manifest is not valid JSON ({e})") from None
    if manifest.get("format") != "densedet-bundle":
        raise TensorFormatError(f"{mpath}: unrecognised bundle format tag")
    arrays = {}
    for name, entry in manifest["tensors"].items():
        arr = load_tensor(dirpath / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise TensorFormatError(
                f"{dirpath}/{entry['file']}: shape {list(arr.shape)} disagrees with manifest {entry['shape']}"
            )
        arrays[name] = arr
    return arrays, manifest.get("extra", {})
