"""Binary P6 portable-pixmap reader/writer (8-bit, maxval 255)."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def write_ppm(path, img: np.ndarray):
    """img is (H, W, 3) uint8 (or float in [0,1], quantized on write)."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected (H, W, 3) image, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _read_token(buf: bytes, pos: int):
    # skip whitespace and '#' comments, then read one ASCII token
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
        raise DataError(f"truncated pixmap header at byte {start}")
    return buf[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into float64 (H, W, 3) scaled to [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise DataError(f"{path}: not a P6 pixmap (magic {magic!r} at byte 0)")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError as e:
            raise DataError(f"{path}: bad header token {tok!r} "
                            f"near byte {pos}") from e
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise DataError(
            f"{path}: payload has {len(payload)} bytes at offset {pos}, "
            f"header promises {need}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0
