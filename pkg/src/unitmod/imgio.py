"""8-bit PNG input/output for [3,H,W] float images in [0,1]."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DimensionError


def save_image(path, chw: np.ndarray) -> None:
    if chw.ndim != 3 or chw.shape[0] != 3:
        raise DimensionError(f"expected [3,H,W] image, got {chw.shape}")
    arr = np.clip(chw, 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return (arr / 255.0).transpose(2, 0, 1)
