"""Minimal lossless grayscale PNG writer.

Byte output is a pure function of the pixel array: fixed zlib level, no
timestamps or ancillary chunks, so identical slices always serialize to
identical bytes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    body = tag + payload
    return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))


def encode_gray_png(img: np.ndarray) -> bytes:
    """Encode a 2D uint8 array as an 8-bit grayscale PNG."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"expected a 2D uint8 array, got {img.shape} {img.dtype}")
    h, w = img.shape
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + img[row].tobytes() for row in range(h))
    return (_SIGNATURE
            + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(raw, 9))
            + _chunk(b"IEND", b""))


def window_to_bytes(plane: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Map [lo, hi] linearly onto [0, 255] with round-half-up, clipping outside."""
    if hi <= lo:
        raise ValueError(f"need lo < hi, got ({lo}, {hi})")
    scaled = (np.asarray(plane, dtype=np.float64) - lo) / (hi - lo) * 255.0
    return np.floor(np.clip(scaled, 0.0, 255.0) + 0.5).clip(0, 255).astype(np.uint8)
