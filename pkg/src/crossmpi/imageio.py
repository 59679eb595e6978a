"""Binary PGM (P5) and PPM (P6) image files, 8-bit only.

Pixels are stored as value/255 floats in (H, W, C) arrays internally;
writing quantizes with round-half-away handled by numpy rounding. A write
followed by a read is lossless for images already on the 8-bit grid.
"""

from __future__ import annotations

import os

import numpy as np


class ImageFormatError(ValueError):
    """Malformed or unsupported PGM/PPM content."""


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos] not in b"\r\n":
                pos += 1
        elif buf[pos] in b" \t\r\n":
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header")
    return buf[start:pos], pos


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a P5/P6 file into an (H, W, C) float64 array in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise ImageFormatError(f"unsupported magic {magic!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"malformed header token {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images supported, got maxval {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * channels
    payload = buf[pos : pos + need]
    if len(payload) != need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(height, width, channels)


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an (H, W, C) array in [0, 1] as P5 (C=1) or P6 (C=3)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ImageFormatError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    h, w, c = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(quantized.tobytes())
