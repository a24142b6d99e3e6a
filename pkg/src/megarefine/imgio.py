"""Binary image dumps: PPM (P6) for color, PFM for float maps.

PFM files are written with scale -1.0 (little-endian float32) and rows
ordered bottom-to-top, which is what the format's consumers expect; the
in-memory convention everywhere else in this package is row 0 = top.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["save_ppm", "load_ppm", "save_pfm", "load_pfm"]


def save_ppm(path, rgb: np.ndarray) -> None:
    """Write an H x W x 3 float image in [0, 1] as binary PPM."""
    a = np.asarray(rgb, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"rgb must be HxWx3, got {a.shape}")
    h, w = a.shape[:2]
    bytes8 = (np.clip(a, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(bytes8.tobytes())


def load_ppm(path) -> np.ndarray:
    """Read a binary PPM back to H x W x 3 floats in [0, 1]."""
    data = Path(path).read_bytes()
    magic, rest = _token(data, 0)
    if magic != b"P6":
        raise ValueError(f"not a binary PPM (magic {magic!r})")
    w_tok, rest = _token(data, rest)
    h_tok, rest = _token(data, rest)
    maxval_tok, rest = _token(data, rest)
    w, h, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=rest)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def _token(data: bytes, pos: int) -> tuple[bytes, int]:
    # netpbm token scan: skip whitespace and # comments, stop after the
    # single whitespace byte that terminates the token.
    while pos < len(data):
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("truncated netpbm header")
    return data[start:pos], pos + 1


def save_pfm(path, img: np.ndarray) -> None:
    """Write an H x W (grayscale Pf) or H x W x 3 (color PF) float map."""
    a = np.asarray(img, dtype=np.float32)
    if a.ndim == 2:
        magic = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"img must be HxW or HxWx3, got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    """Read a PFM file; returns H x W or H x W x 3 float64, row 0 = top."""
    data = Path(path).read_bytes()
    magic, pos = _token(data, 0)
    if magic == b"Pf":
        channels = 1
    elif magic == b"PF":
        channels = 3
    else:
        raise ValueError(f"not a PFM file (magic {magic!r})")
    w_tok, pos = _token(data, pos)
    h_tok, pos = _token(data, pos)
    scale_tok, pos = _token(data, pos)
    w, h = int(w_tok), int(h_tok)
    scale = float(scale_tok)
    dtype = "<f4" if scale < 0 else ">f4"
    flat = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos)
    shape = (h, w) if channels == 1 else (h, w, 3)
    img = flat.reshape(shape)[::-1].astype(np.float64)
    if abs(scale) not in (0.0, 1.0):
        img = img * abs(scale)
    return img
