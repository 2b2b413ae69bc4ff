"""Side-by-side PPM export of adversarial examples.

Panel layout (left to right, one row, no scaling by default)::

    [ x ] [gap] [ x + delta ] [gap] [ location map ]

Each gap is ``GAP`` columns of mid grey (128).  The location map is white
where any channel of ``delta`` is non-zero and black elsewhere.  An optional
highlight rectangle is drawn in red on the ``x + delta`` panel, only on
pixels the perturbation leaves untouched.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

GAP = 2
GREY = 128
RED = (255, 0, 0)


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def compose_panels(x, delta, highlight=None, scale: int = 1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    adv = x + delta
    if adv.min() < -1e-12 or adv.max() > 1.0 + 1e-12:
        raise ValueError("x + delta leaves [0, 1]")
    h, w, c = x.shape
    touched = np.any(delta != 0, axis=-1)
    left = to_u8(x)
    mid = to_u8(adv)
    if highlight is not None:
        r0, c0, r1, c1 = highlight
        ring = np.zeros((h, w), bool)
        ring[max(r0, 0) : min(r1 + 1, h), [c for c in (c0, c1) if 0 <= c < w]] = True
        ring[[r for r in (r0, r1) if 0 <= r < h], max(c0, 0) : min(c1 + 1, w)] = True
        ring &= ~touched
        mid[ring] = np.array(RED[:c] if c <= 3 else RED + (0,) * (c - 3), dtype=np.uint8)
    loc = np.repeat((touched * 255).astype(np.uint8)[..., None], c, axis=-1)
    gap = np.full((h, GAP, c), GREY, np.uint8)
    out = np.concatenate([left, gap, mid, gap, loc], axis=1)
    if c == 1:
        out = np.repeat(out, 3, axis=-1)
    if scale > 1:
        out = np.repeat(np.repeat(out, scale, axis=0), scale, axis=1)
    return out


def write_ppm(img_u8: np.ndarray, path) -> None:
    h, w, _ = img_u8.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img_u8, np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pixels = np.frombuffer(data, np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3)


def split_panels(img_u8: np.ndarray, w: int, scale: int = 1):
    """Recover ``(x, x + delta, location map)`` as float images in [0, 1]."""
    if scale > 1:
        img_u8 = img_u8[::scale, ::scale]
    panels = [img_u8[:, k * (w + GAP) : k * (w + GAP) + w] for k in range(3)]
    return [p.astype(np.float64) / 255.0 for p in panels]


def export_perturbation_image(x, delta, path, highlight=None, scale: int = 1) -> Path:
    """Write the three-panel comparison for one image; returns the path."""
    path = Path(path)
    write_ppm(compose_panels(x, delta, highlight, scale), path)
    return path
