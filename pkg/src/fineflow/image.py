"""Raster images and the fixed preprocessing chain.

Decoders cover binary PPM (P6), binary PGM (P5), and 8-bit non-interlaced
PNG (grayscale and truecolor). The preprocessing chain applied before any
model sees a pixel is: resize -> sharpen -> BGR-to-RGB (only for sources
declared BGR) -> scale to [0, 1].
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DecodeError, ShapeError
from .tensor import Tensor

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass
class ImageU8:
    """Decoded 8-bit raster, row-major and channel-interleaved."""

    height: int
    width: int
    channels: int
    order: str  # BGR | RGB | GRAY
    pixels: np.ndarray  # uint8, shape [height, width, channels]

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise ShapeError(
                f"pixel buffer {self.pixels.shape} != "
                f"({self.height}, {self.width}, {self.channels})"
            )
        if (self.order == "GRAY") != (self.channels == 1):
            raise ShapeError("order GRAY iff channels == 1")
        if self.order not in ("BGR", "RGB", "GRAY"):
            raise ShapeError(f"unknown channel order {self.order!r}")

    def copy(self) -> "ImageU8":
        return ImageU8(self.height, self.width, self.channels, self.order, self.pixels.copy())


def _round_u8(values: np.ndarray) -> np.ndarray:
    """Round half away from zero and clamp to [0, 255]."""
    return np.clip(np.floor(values + 0.5), 0.0, 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# decoding


def _parse_pnm_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise DecodeError(f"bad magic at offset 0: expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError(f"truncated header at offset {pos}")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise DecodeError(f"non-numeric header field at offset {start}") from None
    if pos >= len(data):
        raise DecodeError(f"missing pixel data at offset {pos}")
    pos += 1  # single whitespace byte after maxval
    return fields[0], fields[1], fields[2], pos


def _decode_pnm(data: bytes, magic: bytes, channels: int) -> ImageU8:
    w, h, maxval, pos = _parse_pnm_header(data, magic)
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval} at offset 2 (only 255)")
    need = w * h * channels
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise DecodeError(f"truncated pixel data at offset {pos + len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    order = "GRAY" if channels == 1 else "RGB"
    return ImageU8(h, w, channels, order, pixels)


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _decode_png(data: bytes) -> ImageU8:
    if not data.startswith(PNG_SIGNATURE):
        raise DecodeError("bad PNG signature at offset 0")
    pos = len(PNG_SIGNATURE)
    width = height = bit_depth = color_type = interlace = None
    idat = bytearray()
    while pos < len(data):
        if pos + 8 > len(data):
            raise DecodeError(f"truncated chunk header at offset {pos}")
        length = int.from_bytes(data[pos : pos + 4], "big")
        ctype = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        if len(body) < length or pos + 12 + length > len(data):
            raise DecodeError(f"truncated chunk body at offset {pos + 8}")
        crc = int.from_bytes(data[pos + 8 + length : pos + 12 + length], "big")
        if zlib.crc32(ctype + body) & 0xFFFFFFFF != crc:
            raise DecodeError(f"CRC mismatch at offset {pos + 8 + length}")
        if ctype == b"IHDR":
            width = int.from_bytes(body[0:4], "big")
            height = int.from_bytes(body[4:8], "big")
            bit_depth, color_type = body[8], body[9]
            interlace = body[12]
        elif ctype == b"IDAT":
            idat.extend(body)
        elif ctype == b"IEND":
            break
        pos += 12 + length
    if width is None:
        raise DecodeError("missing IHDR chunk")
    if bit_depth != 8 or color_type not in (0, 2):
        raise DecodeError(
            f"unsupported PNG (bit depth {bit_depth}, color type {color_type}); "
            "only 8-bit gray/truecolor"
        )
    if interlace != 0:
        raise DecodeError("interlaced PNG not supported")
    channels = 1 if color_type == 0 else 3
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise DecodeError(f"bad IDAT stream: {exc}") from None
    stride = width * channels
    if len(raw) != (stride + 1) * height:
        raise DecodeError(f"IDAT length {len(raw)} != expected {(stride + 1) * height}")

    out = np.zeros((height, stride), dtype=np.uint8)
    bpp = channels
    for y in range(height):
        ftype = raw[y * (stride + 1)]
        line = bytearray(raw[y * (stride + 1) + 1 : (y + 1) * (stride + 1)])
        prev = out[y - 1] if y > 0 else np.zeros(stride, dtype=np.uint8)
        if ftype == 0:
            pass
        elif ftype == 1:  # Sub
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:  # Up
            for i in range(stride):
                line[i] = (line[i] + int(prev[i])) & 0xFF
        elif ftype == 3:  # Average
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + ((left + int(prev[i])) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                up_left = int(prev[i - bpp]) if i >= bpp else 0
                line[i] = (line[i] + _paeth(left, int(prev[i]), up_left)) & 0xFF
        else:
            raise DecodeError(f"unknown PNG filter {ftype} in row {y}")
        out[y] = np.frombuffer(bytes(line), dtype=np.uint8)
    pixels = out.reshape(height, width, channels)
    order = "GRAY" if channels == 1 else "RGB"
    return ImageU8(height, width, channels, order, pixels)


def decode_image(data: bytes, hint: str, assume_bgr: bool = False) -> ImageU8:
    """Decode PPM/PGM/PNG bytes; `hint` names the container format.

    PNG/PPM color content is tagged RGB by convention; pass assume_bgr=True
    for corpora known to store BGR so the preprocessing chain swaps it.
    """
    if not data:
        raise DecodeError("empty byte sequence at offset 0")
    hint = hint.lower().lstrip(".")
    if hint == "ppm":
        img = _decode_pnm(data, b"P6", 3)
    elif hint == "pgm":
        img = _decode_pnm(data, b"P5", 1)
    elif hint == "png":
        img = _decode_png(data)
    else:
        raise DecodeError(f"unsupported format hint {hint!r}")
    if assume_bgr and img.channels == 3:
        img.order = "BGR"
    return img


def decode_file(path: str, assume_bgr: bool = False) -> ImageU8:
    hint = str(path).rsplit(".", 1)[-1]
    with open(path, "rb") as fh:
        return decode_image(fh.read(), hint, assume_bgr=assume_bgr)


def encode_ppm(img: ImageU8) -> bytes:
    if img.channels != 3:
        raise ShapeError("PPM needs 3 channels")
    return b"P6\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def encode_pgm(img: ImageU8) -> bytes:
    if img.channels != 1:
        raise ShapeError("PGM needs 1 channel")
    return b"P5\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


# ---------------------------------------------------------------------------
# preprocessing operations


def resize_bilinear(img: ImageU8, out_h: int, out_w: int) -> ImageU8:
    """Bilinear resize with half-pixel center alignment and edge clamping."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("target extents must be >= 1")
    if out_h == img.height and out_w == img.width:
        return img.copy()
    sy = img.height / out_h
    sx = img.width / out_w
    # src = (dst + 0.5) * scale - 0.5, expressed as an affine map
    matrix = np.array(
        [[sx, 0.0, 0.5 * sx - 0.5], [0.0, sy, 0.5 * sy - 0.5]], dtype=np.float64
    )
    planes = np.ascontiguousarray(img.pixels.transpose(2, 0, 1).astype(np.float64))
    warped = kernels.warp_bilinear(planes, matrix, out_h, out_w, False)
    pixels = _round_u8(warped).transpose(1, 2, 0)
    return ImageU8(out_h, out_w, img.channels, img.order, pixels)


_SHARPEN_OFFSETS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def sharpen(img: ImageU8) -> ImageU8:
    """3x3 sharpening convolution [[0,-1,0],[-1,5,-1],[0,-1,0]], edge-clamped.

    Integer arithmetic throughout, so the result is exact; a constant image
    is a fixed point because the kernel sums to 1.
    """
    padded = np.pad(img.pixels.astype(np.int32), ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.height, img.width
    acc = 5 * padded[1 : 1 + h, 1 : 1 + w]
    for dy, dx in _SHARPEN_OFFSETS:
        acc = acc - padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    return ImageU8(h, w, img.channels, img.order, np.clip(acc, 0, 255).astype(np.uint8))


def bgr_to_rgb(img: ImageU8) -> ImageU8:
    """Swap channels 0 and 2; refuses non-BGR input to prevent double swaps."""
    if img.order != "BGR":
        raise ShapeError(f"bgr_to_rgb needs a BGR image, got {img.order}")
    return ImageU8(img.height, img.width, 3, "RGB", img.pixels[:, :, ::-1])


def scale_to_unit(img: ImageU8, channels: int = 3) -> Tensor:
    """Map pixels to [0, 1] as a channel-major tensor; grayscale inputs are
    replicated across channels when the model expects more than one.
    """
    arr = img.pixels.astype(np.float64) / 255.0
    chw = arr.transpose(2, 0, 1)
    if img.channels == 1 and channels > 1:
        chw = np.repeat(chw, channels, axis=0)
    elif img.channels != channels:
        raise ShapeError(f"cannot map {img.channels} channels to {channels}")
    return Tensor(chw)
