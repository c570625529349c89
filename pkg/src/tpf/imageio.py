"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255.

Images live in memory as float64 arrays shaped (C, H, W) with values in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {c}")
    magic = b"P6" if c == 3 else b"P5"
    body = to_bytes(img).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(body)


def _tokens(raw: bytes, pos: int, count: int):
    out = []
    n = len(raw)
    while len(out) < count:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace():
            pos += 1
        out.append(raw[start:pos])
    return out, pos + 1  # single whitespace byte after maxval


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(raw, 0, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    c = 3 if magic == b"P6" else 1
    body = np.frombuffer(raw, dtype=np.uint8, count=w * h * c, offset=pos)
    return body.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, matching what write/read would produce."""
    return to_bytes(img).astype(np.float64) / 255.0
