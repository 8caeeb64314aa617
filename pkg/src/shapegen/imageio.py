"""Image export: PNG (via Pillow) and binary PPM, plus grid assembly."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    x = np.clip((img.astype(np.float64) + 1.0) * 127.5, 0, 255)
    return np.round(x).astype(np.uint8).transpose(1, 2, 0)


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    arr = to_uint8(img)
    if path.suffix.lower() == ".ppm":
        h, w, _ = arr.shape
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode())
            f.write(arr.tobytes())
    else:
        Image.fromarray(arr).save(path)


def make_grid(images: list[np.ndarray], ncols: int, pad: int = 1,
              pad_value: float = -1.0) -> np.ndarray:
    """Tile (3, H, W) images row-major into one (3, H', W') image."""
    if not images:
        raise ValueError("make_grid: no images")
    c, h, w = images[0].shape
    nrows = (len(images) + ncols - 1) // ncols
    out = np.full(
        (c, nrows * (h + pad) + pad, ncols * (w + pad) + pad),
        pad_value, dtype=np.float32,
    )
    for i, img in enumerate(images):
        r, col = divmod(i, ncols)
        y = pad + r * (h + pad)
        x = pad + col * (w + pad)
        out[:, y : y + h, x : x + w] = img
    return out


def save_grid(path, images: list[np.ndarray], ncols: int) -> None:
    save_image(path, make_grid(images, ncols))
