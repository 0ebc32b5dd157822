"""Float image <-> PNG conversion used at every disk boundary.

In-memory images are float arrays in [-1, 1], shape (3, H, W) or a batch
thereof; PNGs are the only quantized representation.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    arr = np.asarray(image, dtype=np.float64)
    if hasattr(image, "detach"):
        arr = image.detach().cpu().numpy().astype(np.float64)
    arr = np.clip(arr, -1.0, 1.0)
    arr = np.round((arr + 1.0) * 127.5).astype(np.uint8)
    return np.transpose(arr, (1, 2, 0))


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    arr = np.transpose(arr.astype(np.float32), (2, 0, 1))
    return arr / 127.5 - 1.0


def save_image_png(image, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))
