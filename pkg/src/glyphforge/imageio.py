"""Canvas export: binary PGM (always available) and PNG (needs Pillow).

Canvases hold ink as 1.0; files are black ink on white paper.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

GUTTER = 2


def to_bytes(canvas: np.ndarray) -> np.ndarray:
    """``uint8`` image with value ``round(255 * (1 - ink))``."""
    c = np.asarray(canvas, dtype=np.float64)
    if c.size and (c.min() < 0.0 or c.max() > 1.0):
        raise ValueError(f"canvas values must lie in [0, 1], got [{c.min()}, {c.max()}]")
    return np.rint(255.0 * (1.0 - c)).astype(np.uint8)


def grid(canvases: np.ndarray, gutter: int = GUTTER) -> np.ndarray:
    """Tile ``[rows, cols, H, W]`` canvases row-major with blank gutters."""
    c = np.asarray(canvases, dtype=np.float64)
    if c.ndim == 2:
        return c
    if c.ndim != 4:
        raise ValueError(f"expected [rows, cols, H, W] canvases, got shape {c.shape}")
    rows, cols, h, w = c.shape
    out = np.zeros((rows * h + (rows - 1) * gutter, cols * w + (cols - 1) * gutter))
    for r in range(rows):
        for k in range(cols):
            y, x = r * (h + gutter), k * (w + gutter)
            out[y:y + h, x:x + w] = c[r, k]
    return out


def encode_pgm(canvas: np.ndarray) -> bytes:
    img = to_bytes(canvas)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse a binary 8-bit PGM back to its ``uint8`` pixels."""
    parts = data.split(maxsplit=4)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    header = b"P5\n%d %d\n255\n" % (w, h)
    if not data.startswith(header):
        raise ValueError("non-canonical PGM header")
    payload = data[len(header):]
    if len(payload) != w * h:
        raise ValueError(f"payload is {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def write_image(canvases, path, fmt: str | None = None) -> Path:
    """Write one canvas ``[H, W]`` or a grid ``[rows, cols, H, W]`` to ``path``.

    ``fmt`` is ``"pgm"`` or ``"png"``; by default it follows the file suffix.
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "pgm").lower()
    img = grid(canvases)
    if fmt == "pgm":
        path.write_bytes(encode_pgm(img))
    elif fmt == "png":
        from PIL import Image

        Image.fromarray(to_bytes(img), mode="L").save(path, format="PNG")
    else:
        raise ValueError(f"unknown image format {fmt!r}")
    return path
