"""Binary PPM (P6, maxval 255) reading and writing for ``[3, H, W]`` float images."""

from __future__ import annotations

import os

import numpy as np

from .errors import DimensionError, FormatError


def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        out.append(buf[start:pos])
    return out, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode P6 bytes into a float64 ``[3, H, W]`` array in ``[0, 1]``."""
    if buf[:2] != b"P6":
        raise FormatError("not a binary PPM (missing P6 magic)", 0)
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError("non-numeric PPM header field", pos) from None
    if width < 1 or height < 1:
        raise FormatError("PPM dimensions must be positive", pos)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", pos)
    pos += 1  # single whitespace byte before raster
    need = width * height * 3
    if len(buf) - pos < need:
        raise FormatError(f"PPM raster truncated: need {need} bytes, have {len(buf) - pos}", len(buf))
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return raster.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_ppm(image: np.ndarray) -> bytes:
    """Quantise a ``[3, H, W]`` image in ``[0, 1]`` to P6 bytes (round to nearest)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected [3, H, W], got {image.shape}")
    _, h, w = image.shape
    raster = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + raster.transpose(1, 2, 0).tobytes()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))
