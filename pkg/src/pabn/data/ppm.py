"""Binary PPM (P6) reading/writing and half-pixel bilinear resizing."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Malformed or truncated image file."""


def _parse_header(buf: bytes, path) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, payload offset)."""
    if buf[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (magic {buf[:2]!r}, expected b'P6')")
    tokens: list[int] = []
    pos = 2
    n = len(buf)
    while len(tokens) < 3:
        if pos >= n:
            raise ImageFormatError(f"{path}: truncated PPM header")
        ch = buf[pos:pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError(f"{path}: truncated PPM header comment")
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < n and buf[pos:pos + 1].isdigit():
                pos += 1
            if start == pos or (pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#"):
                raise ImageFormatError(f"{path}: malformed PPM header near byte {start}")
            tokens.append(int(buf[start:pos]))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after PPM maxval")
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: invalid PPM size {width}x{height}")
    if not 1 <= maxval <= 255:
        raise ImageFormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    return width, height, maxval, pos + 1


def read_ppm_header(path) -> tuple[int, int, int]:
    """(width, height, maxval) without decoding the payload."""
    with open(path, "rb") as fh:
        head = fh.read(512)
    width, height, maxval, _ = _parse_header(head, path)
    return width, height, maxval


def read_ppm(path) -> tuple[np.ndarray, int]:
    """Decode a P6 file into an [H, W, 3] uint8 array and its maxval."""
    buf = Path(path).read_bytes()
    width, height, maxval, offset = _parse_header(buf, path)
    expected = width * height * 3
    payload = buf[offset:offset + expected]
    if len(payload) != expected:
        raise ImageFormatError(f"{path}: truncated PPM payload ({len(payload)} of {expected} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3), maxval


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"write_ppm expects an [H,W,3] uint8 array, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())
    os.replace(tmp, path)


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an [H, W, C] array, align-corners=false convention.

    Source coordinate for output pixel d is (d + 0.5) * in/out - 0.5, clamped to
    the valid range. Works in float64.
    """
    img = np.asarray(image, dtype=np.float64)
    y0, y1, fy = _axis_weights(img.shape[0], out_h)
    x0, x1, fx = _axis_weights(img.shape[1], out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def decode_and_resize(path, size: int = 84) -> np.ndarray:
    """PPM file -> [3, size, size] float32 with channels scaled to [0, 1]."""
    raw, maxval = read_ppm(path)
    if raw.shape[0] < 2 or raw.shape[1] < 2:
        raise ImageFormatError(f"{path}: image must be at least 2x2, got {raw.shape[1]}x{raw.shape[0]}")
    resized = resize_bilinear(raw, size, size) / maxval
    return np.ascontiguousarray(resized.transpose(2, 0, 1), dtype=np.float32)
