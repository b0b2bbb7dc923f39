"""Unsupervised consistency losses for the enhancement module.

Five terms, each zero at a documented fixed point:

* transmission consistency  -- sum of squared (a*t1 - t2) over all pixels
* saturated pixel           -- hinge on enhanced values outside [0, 1]
* total variation           -- squared forward differences along H and W
* color cast                -- squared pairwise channel-mean differences
                               (gray-world assumption)
* assisting color cast      -- squared error of the predicted cast against
                               the background light used as its label

Pixel sums run over channels and spatial positions per image and are then
averaged over the batch, so a loss value does not depend on batch size.
The saturated-pixel term is the hinge form: it differs from adding the
raw pixel values only by a constant (2 * pixel count) and has identical
gradients, while reading exactly 0 for healthy in-range outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, channel_mean, linear, spatial_diff


@dataclass
class LossWeights:
    """Weights w1..w5 of the module loss terms."""
    w1: float = 500.0
    w2: float = 0.01
    w3: float = 0.01
    w4: float = 0.1
    w5: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossReport:
    """Per-step record of every raw loss term and the combined values."""
    step: int = 0
    l_t: float = 0.0
    l_sp: float = 0.0
    l_tv: float = 0.0
    l_cc: float = 0.0
    l_acc: float = 0.0
    l_unitmodule: float = 0.0
    l_detector: float = 0.0
    l_total: float = 0.0

    CSV_HEADER = "step,l_t,l_sp,l_tv,l_cc,l_acc,l_unitmodule,l_detector,l_total"

    def csv_row(self) -> str:
        vals = [self.l_t, self.l_sp, self.l_tv, self.l_cc, self.l_acc,
                self.l_unitmodule, self.l_detector, self.l_total]
        return ",".join([str(self.step)] + [f"{v:.9g}" for v in vals])


def _batch(t: Tensor) -> int:
    return t.shape[0]


def transmission_loss(t1: Tensor, t2: Tensor, alpha: float) -> Tensor:
    """Squared consistency gap between a*t1 and t2, pixel-summed then
    batch-averaged.  Gradients flow into both maps."""
    if t1.shape != t2.shape:
        raise DimensionError(f"transmission maps differ: {t1.shape} vs {t2.shape}")
    d = alpha * t1 - t2
    return (d * d).sum() * (1.0 / _batch(t1))


def saturated_pixel_loss(j: Tensor, j_prime: Tensor) -> Tensor:
    """Hinge penalty on pixels above 1 or below 0 in both enhanced images."""
    total = None
    for img in (j, j_prime):
        over = (img - 1.0).relu().sum()
        under = (0.0 - img).relu().sum()
        part = over + under
        total = part if total is None else total + part
    return total * (1.0 / _batch(j))


def total_variation_loss(j: Tensor) -> Tensor:
    """Sum of squared forward differences along both spatial axes."""
    if j.shape[2] < 2 or j.shape[3] < 2:
        raise DimensionError(f"total variation needs H,W >= 2, got {j.shape}")
    dh = spatial_diff(j, axis=2)
    dw = spatial_diff(j, axis=3)
    return ((dh * dh).sum() + (dw * dw).sum()) * (1.0 / _batch(j))


# rows produce (R-G, G-B, B-R) from per-channel means
_PAIR_DIFF = np.array([[1.0, -1.0, 0.0],
                       [0.0, 1.0, -1.0],
                       [-1.0, 0.0, 1.0]])


def color_cast_loss(j: Tensor) -> Tensor:
    """Gray-world deviation: squared differences of all channel-mean pairs."""
    if j.shape[1] != 3:
        raise DimensionError(f"color cast loss needs 3 channels, got {j.shape[1]} (axis 1)")
    means = channel_mean(j)
    pairs = linear(means, Tensor(_PAIR_DIFF.astype(j.data.dtype)))
    return (pairs * pairs).sum() * (1.0 / _batch(j))


def assisting_color_cast_loss(c_hat: Tensor, light: Tensor) -> Tensor:
    """Squared error of the cast prediction against the (detached) light."""
    if c_hat.shape != light.shape:
        raise DimensionError(f"prediction {c_hat.shape} != label {light.shape}")
    d = c_hat - light.detach()
    return (d * d).sum() * (1.0 / _batch(c_hat))


def unit_module_loss(l_t: Tensor, l_sp: Tensor, l_tv: Tensor, l_cc: Tensor,
                     l_acc: Tensor, weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Weighted sum of the five terms plus a report of the raw values."""
    total = (weights.w1 * l_t + weights.w2 * l_sp + weights.w3 * l_tv
             + weights.w4 * l_cc + weights.w5 * l_acc)
    report = LossReport(
        l_t=l_t.item(), l_sp=l_sp.item(), l_tv=l_tv.item(), l_cc=l_cc.item(),
        l_acc=l_acc.item(), l_unitmodule=total.item(), l_total=total.item())
    return total, report
