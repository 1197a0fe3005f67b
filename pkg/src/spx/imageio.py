"""Binary PPM (P6) / PGM (P5) reading and writing, palette files, optional PNG."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _write_pnm(path, magic: bytes, arr: np.ndarray):
    h, w = arr.shape[:2]
    try:
        with open(path, "wb") as f:
            f.write(magic + b"\n%d %d\n255\n" % (w, h))
            f.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def write_ppm(path, rgb: np.ndarray):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM needs an (H, W, 3) uint8 array, got {rgb.shape} {rgb.dtype}")
    _write_pnm(path, b"P6", rgb)


def write_pgm(path, gray: np.ndarray):
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"PGM needs an (H, W) uint8 array, got {gray.shape} {gray.dtype}")
    _write_pnm(path, b"P5", gray)


def _tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    toks, i = [], 0
    while len(toks) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PNM header")
        toks.append(buf[i:j])
        i = j
    return toks, i + 1  # exactly one whitespace byte before the raster


def read_pnm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror}") from e
    (magic, w, h, maxval), off = _tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PNM supported (maxval {maxval})")
    if magic == b"P6":
        shape = (h, w, 3)
    elif magic == b"P5":
        shape = (h, w)
    else:
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    n = int(np.prod(shape))
    raster = buf[off : off + n]
    if len(raster) != n:
        raise ValueError(f"{path}: raster truncated ({len(raster)} of {n} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(shape).copy()


def write_png(path, rgb: np.ndarray):
    from PIL import Image

    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, format="PNG")


def write_palette(path, palette: np.ndarray):
    lines = [f"{cid} {r} {g} {b}" for cid, (r, g, b) in enumerate(np.asarray(palette, dtype=int))]
    Path(path).write_text("\n".join(lines) + "\n")


def read_palette(path) -> np.ndarray:
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'class_id R G B'")
        cid, r, g, b = (int(x) for x in parts)
        entries[cid] = (r, g, b)
    pal = np.zeros((max(entries) + 1 if entries else 0, 3), dtype=np.uint8)
    for cid, rgb in entries.items():
        pal[cid] = rgb
    return pal
