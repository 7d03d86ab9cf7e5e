"""Binary PGM (P5) read/write plus a minimal 8-bit grayscale PNG reader.

Everything in the pipeline moves through 8-bit single-channel rasters, so
this module deliberately supports nothing else.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np


class ImageFormatError(ValueError):
    """Raised for malformed or unsupported image files."""


def _read_pgm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments between header tokens
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated PGM header")
    return buf[start:pos], pos


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) file into a (H, W) uint8 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (missing P5 magic)")
    pos = 2
    width, pos = _read_pgm_token(buf, pos)
    height, pos = _read_pgm_token(buf, pos)
    maxval, pos = _read_pgm_token(buf, pos)
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad PGM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PGM supported (maxval={maxval})")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    data = buf[pos:pos + width * height]
    if len(data) != width * height:
        raise ImageFormatError(f"{path}: pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM (P5)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ImageFormatError(f"expected 2-d image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if np.issubdtype(img.dtype, np.integer) and img.min() >= 0 and img.max() <= 255:
            img = img.astype(np.uint8)
        else:
            raise ImageFormatError(f"expected uint8 pixels, got dtype {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def read_png_gray(path) -> np.ndarray:
    """Read an 8-bit grayscale, non-interlaced PNG into a (H, W) uint8 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _PNG_MAGIC:
        raise ImageFormatError(f"{path}: not a PNG file")
    pos = 8
    width = height = None
    idat = b""
    while pos + 8 <= len(buf):
        (length,), ctype = struct.unpack(">I", buf[pos:pos + 4]), buf[pos + 4:pos + 8]
        chunk = buf[pos + 8:pos + 8 + length]
        pos += 12 + length
        if ctype == b"IHDR":
            width, height, depth, color, _, _, interlace = struct.unpack(">IIBBBBB", chunk)
            if depth != 8 or color != 0:
                raise ImageFormatError(f"{path}: only 8-bit grayscale PNG supported")
            if interlace != 0:
                raise ImageFormatError(f"{path}: interlaced PNG not supported")
        elif ctype == b"IDAT":
            idat += chunk
        elif ctype == b"IEND":
            break
    if width is None:
        raise ImageFormatError(f"{path}: missing IHDR")
    raw = zlib.decompress(idat)
    stride = width + 1
    if len(raw) != stride * height:
        raise ImageFormatError(f"{path}: decompressed size mismatch")
    out = np.empty((height, width), dtype=np.uint8)
    prev = np.zeros(width, dtype=np.uint8)
    for y in range(height):
        ftype = raw[y * stride]
        line = np.frombuffer(raw, dtype=np.uint8, count=width, offset=y * stride + 1)
        out[y] = _unfilter(ftype, line, prev, path)
        prev = out[y]
    return out


def _unfilter(ftype: int, line: np.ndarray, prev: np.ndarray, path) -> np.ndarray:
    if ftype == 0:
        return line.copy()
    if ftype == 2:  # Up
        return (line.astype(np.int32) + prev).astype(np.uint8)
    cur = np.zeros(line.shape[0], dtype=np.uint8)
    for x in range(line.shape[0]):
        a = int(cur[x - 1]) if x > 0 else 0
        b = int(prev[x])
        c = int(prev[x - 1]) if x > 0 else 0
        if ftype == 1:  # Sub
            pred = a
        elif ftype == 3:  # Average
            pred = (a + b) // 2
        elif ftype == 4:  # Paeth
            p = a + b - c
            pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
            pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
        else:
            raise ImageFormatError(f"{path}: unknown PNG filter type {ftype}")
        cur[x] = (int(line[x]) + pred) & 0xFF
    return cur


def read_image(path) -> np.ndarray:
    """Read PGM or PNG by file signature; returns (H, W) uint8."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:2] == b"P5":
        return read_pgm(path)
    if head == _PNG_MAGIC:
        return read_png_gray(path)
    raise ImageFormatError(f"{path}: unrecognized image format")
