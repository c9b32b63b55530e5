"""8-bit grayscale PNG helpers and tiny rasterized plots."""
from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_gray(path, img):
    """Write a (H, W) or (1, H, W) array with values in [0, 1] as 8-bit PNG."""
    Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG", optimize=False)


def load_gray(path) -> np.ndarray:
    """Read a grayscale PNG as a (1, H, W) float64 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return arr[None]


def grid(images, ncols: int, pad: int = 1, scale_each: bool = False) -> np.ndarray:
    images = [np.asarray(i, dtype=np.float64).reshape(np.shape(i)[-2:]) for i in images]
    if not images:
        raise ValueError("no images")
    h, w = images[0].shape
    nrows = -(-len(images) // ncols)
    out = np.zeros((nrows * (h + pad) + pad, ncols * (w + pad) + pad))
    for k, img in enumerate(images):
        if scale_each and img.max() > 0:
            img = img / img.max()
        r, c = divmod(k, ncols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        out[y:y + h, x:x + w] = img
    return out


def bar_chart(values, highlight=(), bar_w: int = 6, height: int = 64) -> np.ndarray:
    """Bars scaled between min and max of ``values``; highlighted bars are drawn solid,
    the rest at half intensity."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    span = hi - lo if hi > lo else 1.0
    out = np.zeros((height, len(v) * (bar_w + 1) + 1))
    for k, val in enumerate(v):
        bar_h = 1 + int(round((val - lo) / span * (height - 2)))
        x = 1 + k * (bar_w + 1)
        out[height - bar_h:, x:x + bar_w] = 1.0 if k in highlight else 0.5
    return out
