"""Underwater image formation and its inverse.

The scattering model relates a degraded image I to the clean scene J
through a per-pixel transmission map t and a per-channel background light A:

    I = J * t + (1 - t) * A          (degrade)
    J = (I - (1 - t) * A) / t        (enhance)

A is the spatial mean of each channel, shape ``[N, 3]``.  ``enhance`` never
clips: out-of-range pixels are penalized by the saturated-pixel loss so
gradients keep flowing; clipping happens only at image export.

``alpha_degrade`` blends an image toward its own background light,
``J2 = a*J1 + (1-a)*A``, producing a further-degraded copy whose
background light provably equals the original's: channel means are linear,
so mean(J2) = a*mean(J1) + (1-a)*A = A.
"""

from __future__ import annotations

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, channel_mean

DEFAULT_T_MIN = 0.001
DEFAULT_ALPHA = 0.90


def _check_image(image: Tensor) -> None:
    if image.ndim != 4:
        raise DimensionError(f"image must be [N,C,H,W], got {image.shape}")


def _light_map(light: Tensor, image: Tensor) -> Tensor:
    """Reshape a [N,C] background light for per-pixel broadcasting."""
    n, c = image.shape[0], image.shape[1]
    if light.shape != (n, c):
        raise DimensionError(
            f"background light {light.shape} does not match image batch/channels ({n},{c})")
    return light.reshape(n, c, 1, 1)


def background_light(image: Tensor) -> Tensor:
    """Per-channel spatial mean of the image, shape [N, C]."""
    _check_image(image)
    return channel_mean(image)


def degrade(clean: Tensor, t: Tensor, light: Tensor) -> Tensor:
    """Apply the scattering model: ``clean*t + (1-t)*light``."""
    _check_image(clean)
    if t.shape != clean.shape:
        raise DimensionError(f"transmission {t.shape} != image {clean.shape}")
    a = _light_map(light, clean)
    return clean * t + (1.0 - t) * a


def enhance(degraded: Tensor, t: Tensor, light: Tensor,
            t_min: float = DEFAULT_T_MIN) -> Tensor:
    """Invert the scattering model.  ``t`` must already be clamped >= t_min."""
    _check_image(degraded)
    if t.shape != degraded.shape:
        raise DimensionError(f"transmission {t.shape} != image {degraded.shape}")
    if float(t.data.min()) < t_min:
        raise ContractError(
            f"transmission map contains {t.data.min():.3g} < t_min={t_min}; "
            "clamp before enhancing")
    a = _light_map(light, degraded)
    return (degraded - (1.0 - t) * a) / t


def alpha_degrade(image: Tensor, alpha: float, light: Tensor) -> Tensor:
    """Blend the image toward its background light: ``a*J + (1-a)*A``."""
    _check_image(image)
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    a = _light_map(light, image)
    return alpha * image + (1.0 - alpha) * a
