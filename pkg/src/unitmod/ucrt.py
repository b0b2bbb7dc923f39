"""Underwater Color Random Transfer: hue-mean-bounded HSV jitter.

Images are converted to HSV on the 8-bit-style scale (H in [0,180) so a
full hue circle fits a byte when halved, S and V in [0,255]) but carried in
float, so conversions round-trip to well under 1/255.

The hue mean of real underwater footage sits inside [18, 116].  The jitter
keeps it there: for an image already in range, a global hue shift drawn
from [-5, +5] is truncated so the post-shift mean stays in range; for an
image outside it, a shift of up to 5 is applied toward the range.  Hue
wraps modulo 180; since wrapping pixels can move the mean in surprising
ways, the shift is halved until the resulting mean actually satisfies the
bound (a zero shift always does).  Saturation and value get independent
[-30, +30] shifts clamped to [0, 255].  Each of the three channels fires
with probability 0.5.  The whole transform is a pure function of
(image, rng state).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass
class UcrtConfig:
    hue_range: tuple[float, float] = (18.0, 116.0)
    h_jitter: float = 5.0
    sv_jitter: float = 30.0
    prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.hue_range
        if not 0.0 <= lo < hi < 180.0:
            raise ConfigError(f"hue range must satisfy 0 <= lo < hi < 180, got {self.hue_range}")
        if self.h_jitter <= 0 or self.sv_jitter < 0:
            raise ConfigError("jitter amounts must be positive")
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError(f"probability must be in [0,1], got {self.prob}")


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """[3,H,W] RGB in [0,1] -> [3,H,W] HSV with H in [0,180), S,V in [0,255]."""
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DimensionError(f"expected [3,H,W] image, got {rgb.shape}")
    r, g, b = rgb[0], rgb[1], rgb[2]
    maxc = np.max(rgb, axis=0)
    minc = np.min(rgb, axis=0)
    delta = maxc - minc
    v = maxc * 255.0
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0) * 255.0
    h = np.zeros_like(maxc)
    nz = delta > 0
    dz = np.where(nz, delta, 1.0)
    is_r = nz & (maxc == r)
    is_g = nz & ~is_r & (maxc == g)
    is_b = nz & ~is_r & ~is_g
    h[is_r] = (((g - b) / dz)[is_r]) % 6.0
    h[is_g] = ((b - r) / dz)[is_g] + 2.0
    h[is_b] = ((r - g) / dz)[is_b] + 4.0
    h *= 30.0
    return np.stack([h % 180.0, s, v]).astype(np.float32)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse hexcone conversion back to RGB in [0,1]."""
    if hsv.ndim != 3 or hsv.shape[0] != 3:
        raise DimensionError(f"expected [3,H,W] image, got {hsv.shape}")
    h = (hsv[0] % 180.0) / 30.0
    s = np.clip(hsv[1], 0.0, 255.0) / 255.0
    v = np.clip(hsv[2], 0.0, 255.0) / 255.0
    i = np.floor(h).astype(np.int64) % 6
    f = h - np.floor(h)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b]).astype(np.float32)


def hue_mean(hsv: np.ndarray) -> float:
    """Plain arithmetic mean of the hue channel (no circular statistics)."""
    if hsv.size == 0:
        raise DimensionError("hue_mean of an empty image")
    return float(hsv[0].mean())


def _distance_to_range(value: float, lo: float, hi: float) -> float:
    if value < lo:
        return lo - value
    if value > hi:
        return value - hi
    return 0.0


def _apply_hue_shift(h: np.ndarray, delta: float, lo: float, hi: float,
                     in_range: bool, mean_before: float) -> np.ndarray:
    """Shift the hue plane by ``delta`` (wrapping mod 180), halving the
    shift until the post-wrap mean respects the bound."""
    dist_before = _distance_to_range(mean_before, lo, hi)
    for _ in range(60):
        cand = (h + delta) % 180.0
        m = float(cand.mean())
        if in_range:
            if lo <= m <= hi:
                return cand
        else:
            if _distance_to_range(m, lo, hi) < dist_before:
                return cand
        delta *= 0.5
    return h


def ucrt(rgb: np.ndarray, cfg: UcrtConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the color transfer to one [3,H,W] RGB image in [0,1]."""
    hsv = rgb_to_hsv(rgb)
    lo, hi = cfg.hue_range
    if rng.random() < cfg.prob:
        m = hue_mean(hsv)
        if lo <= m <= hi:
            delta = float(rng.uniform(-cfg.h_jitter, cfg.h_jitter))
            delta = float(np.clip(delta, lo - m, hi - m))
            in_range = True
        else:
            # shift toward the range by a nonzero amount up to the jitter
            magnitude = cfg.h_jitter - float(rng.uniform(0.0, cfg.h_jitter))
            delta = magnitude if m < lo else -magnitude
            in_range = False
        hsv[0] = _apply_hue_shift(hsv[0], delta, lo, hi, in_range, m)
    if rng.random() < cfg.prob:
        hsv[1] = np.clip(hsv[1] + float(rng.uniform(-cfg.sv_jitter, cfg.sv_jitter)),
                         0.0, 255.0)
    if rng.random() < cfg.prob:
        hsv[2] = np.clip(hsv[2] + float(rng.uniform(-cfg.sv_jitter, cfg.sv_jitter)),
                         0.0, 255.0)
    return hsv_to_rgb(hsv)


def hue_stats(images) -> dict:
    """Hue-mean survey over an iterable of [3,H,W] RGB images."""
    means = [hue_mean(rgb_to_hsv(img)) for img in images]
    if not means:
        raise ConfigError("no images to scan")
    arr = np.asarray(means)
    return {
        "count": len(means),
        "hue_mean_min": float(arr.min()),
        "hue_mean_max": float(arr.max()),
        "hue_mean_avg": float(arr.mean()),
        "means": means,
    }
