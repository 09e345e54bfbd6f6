"""Shared test helpers: minimal reference encoders for decoder round trips."""

import struct
import zlib

import numpy as np
import pytest


def png_chunk(ctype: bytes, body: bytes) -> bytes:
    crc = zlib.crc32(ctype + body) & 0xFFFFFFFF
    return struct.pack(">I", len(body)) + ctype + body + struct.pack(">I", crc)


def encode_png(pixels: np.ndarray) -> bytes:
    """Reference PNG encoder: 8-bit gray [H,W] or truecolor [H,W,3], filter 0."""
    if pixels.ndim == 2:
        color_type, channels = 0, 1
        rows = pixels[:, :, None]
    else:
        color_type, channels = 2, pixels.shape[2]
        rows = pixels
    h, w = rows.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    raw = b"".join(b"\x00" + rows[y].astype(np.uint8).tobytes() for y in range(h))
    return (
        b"\x89PNG\r\n\x1a\n"
        + png_chunk(b"IHDR", ihdr)
        + png_chunk(b"IDAT", zlib.compress(raw))
        + png_chunk(b"IEND", b"")
    )


@pytest.fixture
def rng_np():
    return np.random.default_rng(12345)
