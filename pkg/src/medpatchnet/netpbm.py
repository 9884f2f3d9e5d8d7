"""Binary PGM (P5) and PPM (P6) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _tokens(buf: bytes, count: int):
    """Parse ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the first raster byte.
    """
    out = []
    i = 0
    n = len(buf)
    while len(out) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise NetpbmError("truncated header")
        out.append(buf[start:i])
    if i >= n or not buf[i : i + 1].isspace():
        raise NetpbmError("header not terminated by whitespace")
    return out, i + 1


def _read(path, magic: bytes, channels: int):
    buf = Path(path).read_bytes()
    tokens, offset = _tokens(buf, 4)
    if tokens[0] != magic:
        raise NetpbmError(f"{path}: expected {magic.decode()} file, found {tokens[0][:2]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise NetpbmError(f"{path}: malformed header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise NetpbmError(f"{path}: invalid dimensions or maxval ({width}x{height}, maxval {maxval})")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    raster = buf[offset : offset + expected]
    if len(raster) != expected:
        raise NetpbmError(f"{path}: raster truncated ({len(raster)} of {expected} bytes)")
    arr = np.frombuffer(raster, dtype=dtype).astype(np.int64)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return arr.reshape(shape), maxval


def read_pgm_raw(path):
    """Integer raster and maxval of a P5 file."""
    return _read(path, b"P5", 1)


def read_pgm(path) -> np.ndarray:
    """Grayscale image scaled to [0, 1] by its maxval."""
    raw, maxval = read_pgm_raw(path)
    return raw.astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray, maxval: int = 65535) -> None:
    """Write a [0, 1] float image (or integer raster when ``image`` is integral) as P5."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise NetpbmError(f"PGM needs a 2-D array, got shape {arr.shape}")
    if not 0 < maxval < 65536:
        raise NetpbmError("maxval must be in 1..65535")
    if np.issubdtype(arr.dtype, np.integer):
        q = arr.astype(np.int64)
    else:
        if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
            raise NetpbmError("float images must lie in [0, 1]")
        q = np.rint(arr * maxval).astype(np.int64)
    if q.min() < 0 or q.max() > maxval:
        raise NetpbmError("raster values exceed maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + q.astype(dtype).tobytes())


def read_ppm(path) -> np.ndarray:
    raw, maxval = _read(path, b"P6", 3)
    return raw.astype(np.float64) / maxval


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an 8-bit RGB image; floats in [0, 1] are rounded to 0..255."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise NetpbmError(f"PPM needs [H, W, 3], got {arr.shape}")
    if np.issubdtype(arr.dtype, np.floating):
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255)
    header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype("u1").tobytes())
