"""Little-endian binary tensor records and named-record containers.

Tensor record::

    magic  b"CXTN"
    u8     version
    u8     dtype code
    u8     rank
    u32    dims[rank]
    bytes  row-major payload

A container is ``magic(4) | u8 version | u32 header_len | header (UTF-8 JSON,
sorted keys) | u32 count | (u16 name_len | name | tensor record) * count``.
Sample files and checkpoints are containers with different magics.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"CXTN"
SAMPLE_MAGIC = b"CXSM"
CHECKPOINT_MAGIC = b"CXCK"
VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i8"),
    4: np.dtype("<i4"),
}
_CODES = {dt: code for code, dt in _DTYPES.items()}


def _dtype_code(arr: np.ndarray) -> int:
    dt = np.dtype("u1") if arr.dtype == np.bool_ else arr.dtype.newbyteorder("<")
    try:
        return _CODES[dt]
    except KeyError:
        raise FormatError(f"unsupported dtype {arr.dtype}") from None


def write_tensor(fh: BinaryIO, arr) -> None:
    arr = np.asarray(arr)
    code = _dtype_code(arr)
    out = np.asarray(arr, dtype=_DTYPES[code], order="C")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BBB", VERSION, code, out.ndim))
    fh.write(struct.pack(f"<{out.ndim}I", *out.shape))
    fh.write(out.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated tensor data")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, code, rank = struct.unpack("<BBB", _read_exact(fh, 3))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(fh, count * dt.itemsize), dtype=dt).reshape(dims)
    return data.copy()


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def dumps_container(magic: bytes, header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    fh = io.BytesIO()
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    fh.write(magic)
    fh.write(struct.pack("<BI", VERSION, len(head)))
    fh.write(head)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        write_tensor(fh, arr)
    return fh.getvalue()


def loads_container(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    fh = io.BytesIO(data)
    if _read_exact(fh, 4) != magic:
        raise FormatError(f"expected container magic {magic!r}")
    version, hlen = struct.unpack("<BI", _read_exact(fh, 5))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    header = json.loads(_read_exact(fh, hlen).decode())
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, nlen).decode()
        tensors[name] = read_tensor(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after container")
    return header, tensors


def write_container(path, magic: bytes, header: Mapping, tensors: Mapping[str, np.ndarray]) -> str:
    """Write atomically; returns the sha256 of the written bytes."""
    data = dumps_container(magic, header, tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return loads_container(Path(path).read_bytes(), magic)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
