"""Binary field container (``PTYF``) and 16-bit PGM previews.

Container layout, all little-endian::

    offset  size  field
    0       4     magic b"PTYF"
    4       2     version (u16, currently 1)
    6       4     dtype tag b"c128" or b"f64\\0"
    10      4     height (u32)
    14      4     width (u32)
    18      4     channels (u32)
    22      ...   payload, channels*height*width values, C order
"""

from __future__ import annotations

import os
import struct

import numpy as np

__all__ = ["FormatError", "write_field", "read_field", "export_pgm"]

MAGIC = b"PTYF"
VERSION = 1
_HEADER = struct.Struct("<4sH4sIII")
_DTYPES = {b"c128": np.dtype("<c16"), b"f64\x00": np.dtype("<f8")}


class FormatError(ValueError):
    """Raised for malformed container files; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def write_field(path: str | os.PathLike, x: np.ndarray) -> None:
    """Write a complex field ``(H, W)``/``(C, H, W)`` or a real image ``(C, H, W)``."""
    x = np.asarray(x)
    if np.iscomplexobj(x):
        tag, dt = b"c128", _DTYPES[b"c128"]
    else:
        tag, dt = b"f64\x00", _DTYPES[b"f64\x00"]
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D array, got shape {x.shape}")
    c, h, w = x.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, tag, h, w, c))
        fh.write(np.ascontiguousarray(x, dtype=dt).tobytes())


def read_field(path: str | os.PathLike) -> np.ndarray:
    """Read a container written by :func:`write_field`.

    Single-channel complex fields come back as ``(H, W)``; everything else as
    ``(C, H, W)``.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"header truncated: expected {_HEADER.size} bytes, got {len(raw)}", len(raw))
    magic, version, tag, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag!r}", 6)
    dt = _DTYPES[tag]
    expected = h * w * c * dt.itemsize
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, got {actual}", _HEADER.size + min(actual, expected)
        )
    data = np.frombuffer(raw, dtype=dt, offset=_HEADER.size).reshape(c, h, w)
    data = data.astype(dt.newbyteorder("="))
    if tag == b"c128" and c == 1:
        return data[0]
    return data


def export_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a real 2-D image as a binary 16-bit PGM, min-max scaled.

    A constant image has no range and is written as all zeros.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 65535.0)
    else:
        scaled = np.zeros_like(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(scaled.astype(">u2").tobytes())
