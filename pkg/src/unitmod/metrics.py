"""Image-quality metrics used for validation and reporting."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB between same-shape arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def gray_world_deviation(image: np.ndarray) -> float:
    """Sum of squared pairwise channel-mean differences of a [3,H,W] image
    (0 for a perfectly gray-balanced image)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected [3,H,W] image, got {image.shape}")
    m = image.reshape(3, -1).mean(axis=1)
    return float((m[0] - m[1]) ** 2 + (m[1] - m[2]) ** 2 + (m[2] - m[0]) ** 2)
