"""PNG load/save for slides and masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_rgb(path: str | Path) -> np.ndarray:
    """Read a PNG as an (H, W, 3) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_rgb(img: np.ndarray, path: str | Path) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8, got {img.shape} {img.dtype}")
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    """Read a single-channel mask PNG as (H, W) uint8; nonzero = plexus."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    if mask.ndim != 2 or mask.dtype != np.uint8:
        raise ValueError(f"expected (H, W) uint8, got {mask.shape} {mask.dtype}")
    Image.fromarray(mask, mode="L").save(path, format="PNG")
