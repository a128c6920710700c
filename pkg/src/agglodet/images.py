"""Image helpers: bilinear resize, PPM file I/O, rectangle drawing.

Images are CHW float arrays in [0, 1] in memory and binary P6 PPM on disk.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigurationError


def _axis_weights(src: int, dst: int):
    """Source indices and weights for align-corners=false bilinear sampling."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    lo = np.floor(pos).astype(np.int64)
    t = pos - lo
    i0 = np.clip(lo, 0, src - 1)
    i1 = np.clip(lo + 1, 0, src - 1)
    return i0, i1, t


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a CHW image bilinearly."""
    _, h, w = image.shape
    y0, y1, ty = _axis_weights(h, out_h)
    x0, x1, tx = _axis_weights(w, out_w)
    rows = image[:, y0, :] * (1 - ty)[None, :, None] + image[:, y1, :] * ty[None, :, None]
    out = rows[:, :, x0] * (1 - tx)[None, None, :] + rows[:, :, x1] * tx[None, None, :]
    return out.astype(image.dtype)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a CHW float [0,1] image as binary P6 PPM."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigurationError(f"write_ppm: expected (3, H, W), got {image.shape}")
    _, h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into a CHW float32 [0,1] array."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ConfigurationError(f"read_ppm: {path} is not a binary PPM")
    # header: magic, width, height, maxval, single whitespace, then pixels
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # the single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / maxval)


def draw_rectangles(image: np.ndarray, boxes: np.ndarray,
                    color=(1.0, 0.1, 0.1)) -> np.ndarray:
    """Burn 1px rectangle outlines into a copy of a CHW image."""
    out = image.copy()
    _, h, w = out.shape
    for box in np.asarray(boxes).reshape(-1, 4):
        x1 = int(np.clip(np.floor(box[0]), 0, w - 1))
        y1 = int(np.clip(np.floor(box[1]), 0, h - 1))
        x2 = int(np.clip(np.ceil(box[2]) - 1, 0, w - 1))
        y2 = int(np.clip(np.ceil(box[3]) - 1, 0, h - 1))
        for c, v in enumerate(color):
            out[c, y1, x1:x2 + 1] = v
            out[c, y2, x1:x2 + 1] = v
            out[c, y1:y2 + 1, x1] = v
            out[c, y1:y2 + 1, x2] = v
    return out
