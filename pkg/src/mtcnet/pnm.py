"""Binary PGM (P5) / PPM (P6) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import PNMParseError

_WHITESPACE = b" \t\n\r\v\f"


def _next_token(data, pos):
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos:pos + 1] not in _WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PNMParseError("header ended early", start)
    return data[start:pos], start, pos


def parse_pnm(data: bytes):
    """Decode P5/P6 bytes; returns ``(pixels, maxval)`` with pixels ``(H, W, channels)`` uint16."""
    magic, start, pos = _next_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise PNMParseError(f"unsupported magic {magic!r}; expected P5 or P6", start)
    channels = 1 if magic == b"P5" else 3
    fields = []
    for what in ("width", "height", "maxval"):
        tok, start, pos = _next_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PNMParseError(f"invalid {what} {tok!r}", start) from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PNMParseError(f"image size {width}x{height} must be positive", start)
    if not 0 < maxval < 65536:
        raise PNMParseError(f"unsupported maxval {maxval}", start)
    if pos >= len(data):
        raise PNMParseError("missing whitespace after header", pos)
    pos += 1  # single whitespace byte separates header and raster
    depth = 1 if maxval < 256 else 2
    needed = width * height * channels * depth
    raster = data[pos:pos + needed]
    if len(raster) < needed:
        raise PNMParseError(f"truncated raster: need {needed} bytes, found {len(raster)}",
                            pos + len(raster))
    dtype = np.uint8 if depth == 1 else np.dtype(">u2")
    pixels = np.frombuffer(raster, dtype=dtype).astype(np.uint16)
    return pixels.reshape(height, width, channels), maxval


def read_pnm(path):
    return parse_pnm(Path(path).read_bytes())


def encode_ppm(rgb: np.ndarray) -> bytes:
    arr = np.asarray(rgb)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"encode_ppm needs an (H, W, 3) uint8 array, got {arr.dtype} {arr.shape}")
    h, w, _ = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def encode_pgm(gray: np.ndarray, maxval=255) -> bytes:
    arr = np.asarray(gray)
    if arr.ndim != 2:
        raise ValueError(f"encode_pgm needs a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    return b"P5\n%d %d\n%d\n" % (w, h, maxval) + arr.astype(dtype).tobytes()
