"""Binary tensor files and flat parameter manifests.

Tensor file layout (all integers little-endian)::

    b"TNSR" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u32 rank | rank x u32 dims | payload

Parameter sets are stored as one rank-1 tensor file holding every array
flattened and concatenated, plus a JSON sidecar listing ``name``, ``shape``
and element ``offset`` for each entry.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Any, Iterator

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<IBI", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic; not a TNSR file")
    if len(buf) < 13:
        raise TensorFormatError(f"truncated header: {len(buf)} bytes")
    version, code, rank = struct.unpack_from("<IBI", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    start = 13 + 4 * rank
    if len(buf) < start:
        raise TensorFormatError(f"truncated header: rank {rank} needs {start} bytes, got {len(buf)}")
    dims = struct.unpack_from(f"<{rank}I", buf, 13)
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - start != count * dt.itemsize:
        raise TensorFormatError(
            f"payload is {len(buf) - start} bytes, expected {count * dt.itemsize} for dims {dims}"
        )
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=start).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def named_arrays(obj: Any, prefix: str = "", trainable_only: bool = False) -> Iterator[tuple[str, np.ndarray]]:
    """Walk nested dataclasses/lists and yield ``(dotted_name, array)`` leaves.

    Dataclass fields declared with ``metadata={"trainable": False}`` are
    skipped when ``trainable_only`` is set.
    """
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if trainable_only and not f.metadata.get("trainable", True):
                continue
            sub = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_arrays(getattr(obj, f.name), sub, trainable_only)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            sub = f"{prefix}.{i}" if prefix else str(i)
            yield from named_arrays(item, sub, trainable_only)


def save_params(manifest_path, params: Any, extra: dict | None = None) -> None:
    """Write ``<stem>.tns`` plus the JSON manifest at ``manifest_path``."""
    manifest_path = Path(manifest_path)
    entries, chunks, offset = [], [], 0
    items = list(named_arrays(params))
    dtype = np.result_type(*[a for _, a in items]) if items else np.dtype(np.float64)
    for name, arr in items:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(np.asarray(arr, dtype=dtype).ravel())
        offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=dtype)
    tensor_path = manifest_path.with_suffix(".tns")
    save_tensor(tensor_path, flat)
    manifest = {"tensor": tensor_path.name, "dtype": str(np.dtype(dtype)), "entries": entries}
    if extra:
        manifest.update(extra)
    manifest_path.write_text(json.dumps(manifest, indent=2))


def read_manifest(manifest_path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    flat = load_tensor(manifest_path.parent / manifest["tensor"])
    arrays = {}
    for e in manifest["entries"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = flat[e["offset"] : e["offset"] + size].reshape(e["shape"]).copy()
    return manifest, arrays


def load_params_into(params: Any, arrays: dict[str, np.ndarray]) -> None:
    """Copy manifest arrays into a parameter tree of matching structure, in place."""
    names = dict(named_arrays(params))
    missing = set(names) - set(arrays)
    if missing:
        raise KeyError(f"manifest lacks parameters: {sorted(missing)[:5]}")
    for name, arr in names.items():
        src = arrays[name]
        if src.shape != arr.shape:
            raise ValueError(f"{name}: manifest shape {src.shape} != model shape {arr.shape}")
        arr[...] = src
