"""Binary wire formats: TNSR tensors, DMAP density maps and MTCW weight files.

All integers and floats are little-endian; arrays are row-major float64.

    TNSR  b"TNSR" | u8 version=1 | u8 rank | u32 extent * rank | f64 data
    DMAP  b"DMAP" | u8 version=1 | u32 H | u32 W | f64 data
    MTCW  b"MTCW" | u8 version=1 | u32 entries | (u32 name_len, utf-8 name, TNSR record) * entries
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedFileError, UnsupportedVersionError
from .tensor import Tensor

VERSION = 1
_F64 = np.dtype("<f8")


def _read_exact(stream, n, what):
    buf = stream.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"unexpected end of data while reading {what}")
    return buf


def _expect_header(stream, magic):
    got = stream.read(4)
    if got != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {got!r}")
    (version,) = _read_exact(stream, 1, "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"{magic.decode()} version {version} is not supported")


def _read_f64(stream, count, what):
    raw = _read_exact(stream, count * 8, what)
    return np.frombuffer(raw, dtype=_F64).astype(np.float64)


def write_tensor_record(stream, array):
    arr = np.asarray(array, dtype=np.float64, order="C")
    if arr.ndim > 255:
        raise FormatError("TNSR supports rank <= 255")
    stream.write(b"TNSR" + struct.pack("<BB", VERSION, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.astype(_F64, copy=False).tobytes())


def read_tensor_record(stream) -> np.ndarray:
    _expect_header(stream, b"TNSR")
    (rank,) = _read_exact(stream, 1, "rank")
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, "extents"))
    if any(extent == 0 for extent in shape):
        raise FormatError(f"TNSR extents must be positive, got {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    return _read_f64(stream, count, "tensor data").reshape(shape)


def dumps_tensor(t) -> bytes:
    buf = io.BytesIO()
    write_tensor_record(buf, t.data if isinstance(t, Tensor) else t)
    return buf.getvalue()


def loads_tensor(data: bytes) -> Tensor:
    stream = io.BytesIO(data)
    arr = read_tensor_record(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after TNSR record")
    return Tensor(arr)


def save_tensor(t, path):
    Path(path).write_bytes(dumps_tensor(t))


def load_tensor(path) -> Tensor:
    return loads_tensor(Path(path).read_bytes())


def dumps_density(grid) -> bytes:
    arr = np.ascontiguousarray(grid, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"DMAP holds a 2-D grid, got shape {arr.shape}")
    h, w = arr.shape
    return b"DMAP" + struct.pack("<BII", VERSION, h, w) + arr.astype(_F64, copy=False).tobytes()


def loads_density(data: bytes) -> np.ndarray:
    stream = io.BytesIO(data)
    _expect_header(stream, b"DMAP")
    h, w = struct.unpack("<II", _read_exact(stream, 8, "dimensions"))
    grid = _read_f64(stream, h * w, "density data").reshape(h, w)
    if stream.read(1):
        raise FormatError("trailing bytes after DMAP payload")
    return grid


def save_density(grid, path):
    Path(path).write_bytes(dumps_density(getattr(grid, "grid", grid)))


def load_density(path) -> np.ndarray:
    return loads_density(Path(path).read_bytes())


def dumps_weights(named_arrays) -> bytes:
    """Serialize an ordered ``name -> array`` mapping (Tensors accepted)."""
    buf = io.BytesIO()
    items = list(named_arrays.items())
    buf.write(b"MTCW" + struct.pack("<BI", VERSION, len(items)))
    for name, value in items:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)) + encoded)
        write_tensor_record(buf, value.data if isinstance(value, Tensor) else value)
    return buf.getvalue()


def loads_weights(data: bytes) -> dict:
    stream = io.BytesIO(data)
    _expect_header(stream, b"MTCW")
    (count,) = struct.unpack("<I", _read_exact(stream, 4, "entry count"))
    out = {}
    for _ in range(count):
        (length,) = struct.unpack("<I", _read_exact(stream, 4, "name length"))
        try:
            name = _read_exact(stream, length, "entry name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("weight entry name is not valid UTF-8") from exc
        if name in out:
            raise FormatError(f"duplicate weight entry {name!r}")
        out[name] = read_tensor_record(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after MTCW entries")
    return out
