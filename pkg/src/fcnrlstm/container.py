"""Binary tensor container used for checkpoints, dataset frames and density maps.

Layout (all integers little-endian)::

    magic        8 bytes   b"FCNRLSTM"
    version      u32       currently 1
    header_len   u32
    header       header_len bytes of UTF-8 JSON (free-form metadata)
    n_tensors    u32
    n_tensors x:
        name_len u16, name (UTF-8)
        dtype    u8        1=float32 2=float64 3=int64 4=int32 5=uint8 6=bool
        ndim     u8
        dims     ndim x u32
        data     prod(dims) * itemsize bytes, row-major, little-endian

Tensors are returned in file order.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError

MAGIC = b"FCNRLSTM"
VERSION = 1

_CODES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "<i4", 5: "u1", 6: "?"}
_BY_DTYPE = {np.dtype(v).newbyteorder("<") if v not in ("u1", "?") else np.dtype(v): k
             for k, v in _CODES.items()}


def _code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<", "=") else arr.dtype
    dt = np.dtype(dt.str.replace("=", "<"))
    for candidate, code in _BY_DTYPE.items():
        if dt == candidate:
            return code
    raise InvalidArgumentError(f"dtype {arr.dtype} cannot be stored")


def write_container(path, tensors, header: dict | None = None):
    """Write ``tensors`` (mapping or iterable of ``(name, array)``) to ``path``."""
    items = list(tensors.items()) if hasattr(tensors, "items") else list(tensors)
    head = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        code = _code(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_container(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a tensor container (bad magic)")
    version, head_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(take(head_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8", errors="strict")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODES:
            raise FormatError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = np.dtype(_CODES[code])
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return header, tensors
