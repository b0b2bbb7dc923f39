"""The enhancement network: a two-stage stem, two large-kernel depthwise
blocks, a transmission head, the (training-only) color-cast predictor, and
kernel re-parameterization for inference.

Structure (all convs bias-free and followed by group norm unless noted):

* stem: two 3x3 stride-2 convs, ReLU after each norm -> features at H/4.
* LK block: 1x1 conv -> norm -> ReLU, then parallel depthwise KxK and 3x3
  branches (each conv -> norm, no ReLU before their addition), ReLU, 1x1
  conv -> norm, shortcut add with the block input (no ReLU before the
  addition), ReLU.
* transmission head: 2x upsample -> 3x3 conv -> norm -> ReLU -> 2x upsample
  -> 3x3 conv (with bias, no norm) -> sigmoid -> clamp at ``t_min``.  The
  final bias starts at +2.0, so the initial map is ~0.88 and enhancement is
  near-identity, which keeps early joint training stable.
* cast predictor: whole-map 7x7 average pool -> 1x1 conv to 3 channels
  (norm with a single group, ReLU), then a 49->32->16->1 linear stack shared
  across the three channels (norms + ReLU between, sigmoid at the end).

Re-parameterization folds each block's two depthwise branches into one
KxK conv with bias.  The branch norms are input-dependent while training,
so folding uses their exponentially averaged statistics -- the same values
the branches use once the module is switched to eval mode, which makes the
merged and two-branch inference forms numerically identical.  A strict
variant (``reparam_mode="keep_norm"``) instead places a single norm after
the branch sum and merges only the kernels, which is exact in any mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import physics
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import Conv2d, ConvNorm, GroupNorm, Linear, Module, ModuleList
from .tensor import Tensor

REPARAM_FOLD = "fold_norm"
REPARAM_KEEP = "keep_norm"


@dataclass
class UnitModuleConfig:
    stem_channels: tuple[int, int] = (32, 32)
    lk_kernels: tuple[int, int] = (9, 9)
    gn_groups: int = 8
    t_min: float = physics.DEFAULT_T_MIN
    reparam_mode: str = REPARAM_FOLD
    norm_momentum: float = 0.99

    def __post_init__(self):
        cs1, cs2 = self.stem_channels
        for c in (cs1, cs2):
            if c <= 0 or c % self.gn_groups != 0:
                raise ConfigError(
                    f"stem channels {self.stem_channels} must be positive multiples "
                    f"of gn_groups={self.gn_groups}")
        for k in self.lk_kernels:
            if k % 2 == 0 or not 3 <= k <= 13:
                raise ConfigError(f"large kernels must be odd and in [3, 13], got {k}")
        if not 0.0 < self.t_min < 1.0:
            raise ConfigError(f"t_min must be in (0, 1), got {self.t_min}")
        if self.reparam_mode not in (REPARAM_FOLD, REPARAM_KEEP):
            raise ConfigError(f"unknown reparam_mode {self.reparam_mode!r}")


class LKBlock(Module):
    """Residual block around a large-kernel depthwise convolution with a
    parallel 3x3 branch that exists for re-parameterization."""

    def __init__(self, channels: int, k: int, cfg: UnitModuleConfig,
                 rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.k = k
        self.mode = cfg.reparam_mode
        g = cfg.gn_groups
        self.pre = ConvNorm(channels, channels, 1, rng, gn_groups=g)
        self.dw_big = Conv2d(channels, channels, k, rng, groups=channels)
        self.dw_small = Conv2d(channels, channels, 3, rng, groups=channels)
        if self.mode == REPARAM_FOLD:
            self.big_norm = GroupNorm(channels, g, track_stats=True,
                                      momentum=cfg.norm_momentum)
            self.small_norm = GroupNorm(channels, g, track_stats=True,
                                        momentum=cfg.norm_momentum)
        else:
            self.sum_norm = GroupNorm(channels, g)
        self.post = ConvNorm(channels, channels, 1, rng, gn_groups=g)
        self.merged = None

    def _branches(self, y: Tensor) -> Tensor:
        if self.merged is not None:
            s = self.merged(y)
            return self.sum_norm(s) if self.mode == REPARAM_KEEP else s
        if self.mode == REPARAM_FOLD:
            return self.big_norm(self.dw_big(y)) + self.small_norm(self.dw_small(y))
        return self.sum_norm(self.dw_big(y) + self.dw_small(y))

    def __call__(self, x: Tensor) -> Tensor:
        y = self.pre(x).relu()
        s = self._branches(y).relu()
        z = self.post(s)
        return (z + x).relu()

    def folded_kernel_bias(self) -> tuple[np.ndarray, np.ndarray]:
        """Single KxK depthwise kernel + bias equivalent to both branches."""
        if self.k < 3:
            raise ConfigError(f"re-parameterization needs K >= 3, got {self.k}")
        pad = (self.k - 3) // 2
        if self.mode == REPARAM_KEEP:
            kernel = self.dw_big.weight.data.copy()
            kernel[:, :, pad:pad + 3, pad:pad + 3] += self.dw_small.weight.data
            bias = np.zeros(self.channels, dtype=kernel.dtype)
            return kernel, bias
        scale_b, bias_b = self.big_norm.frozen_affine()
        scale_s, bias_s = self.small_norm.frozen_affine()
        kernel = self.dw_big.weight.data * scale_b[:, None, None, None]
        small = self.dw_small.weight.data * scale_s[:, None, None, None]
        kernel[:, :, pad:pad + 3, pad:pad + 3] += small
        return kernel, (bias_b + bias_s).astype(kernel.dtype)

    def merge(self, rng: np.random.Generator) -> None:
        """Replace the parallel branches by one conv; training form is gone."""
        kernel, bias = self.folded_kernel_bias()
        use_bias = self.mode == REPARAM_FOLD
        merged = Conv2d(self.channels, self.channels, self.k, rng,
                        groups=self.channels, bias=use_bias)
        merged.weight.data = kernel.copy()
        if use_bias:
            merged.bias.data = bias.copy()
        self.merged = merged
        del self.dw_big
        del self.dw_small
        if self.mode == REPARAM_FOLD:
            del self.big_norm
            del self.small_norm


class THead(Module):
    """Upsample twice back to image resolution and emit the clamped map."""

    def __init__(self, channels: int, cfg: UnitModuleConfig, rng: np.random.Generator):
        super().__init__()
        self.t_min = cfg.t_min
        self.conv1 = ConvNorm(channels, channels, 3, rng, gn_groups=cfg.gn_groups)
        self.conv2 = Conv2d(channels, 3, 3, rng, bias=True, bias_init=2.0)

    def __call__(self, feats: Tensor) -> Tensor:
        h = self.conv1(T.upsample_nearest2x(feats)).relu()
        raw = self.conv2(T.upsample_nearest2x(h))
        return raw.sigmoid().clamp_min(self.t_min)


class CastPredictor(Module):
    """Predicts the image's color cast from backbone features.

    Training-time only; the per-channel 7x7 map is flattened to 49 features
    and pushed through one linear stack shared by the three channels.
    """

    def __init__(self, channels: int, cfg: UnitModuleConfig, rng: np.random.Generator):
        super().__init__()
        self.reduce = Conv2d(channels, 3, 1, rng)
        self.reduce_norm = GroupNorm(3, 1)
        self.fc1 = Linear(49, 32, rng, bias=False)
        self.norm1 = GroupNorm(32, cfg.gn_groups)
        self.fc2 = Linear(32, 16, rng, bias=False)
        self.norm2 = GroupNorm(16, cfg.gn_groups)
        self.fc3 = Linear(16, 1, rng)

    def _norm_vec(self, x: Tensor, norm: GroupNorm) -> Tensor:
        m, f = x.shape
        return norm(x.reshape(m, f, 1, 1)).reshape(m, f)

    def __call__(self, feats: Tensor) -> Tensor:
        if not self.training:
            raise ContractError("cast predictor is removed at inference time")
        n = feats.shape[0]
        p = T.adaptive_avg_pool(feats, 7)
        r = self.reduce_norm(self.reduce(p)).relu()
        h = r.reshape(n * 3, 49)
        h = self._norm_vec(self.fc1(h), self.norm1).relu()
        h = self._norm_vec(self.fc2(h), self.norm2).relu()
        out = self.fc3(h).reshape(n, 3)
        return out.sigmoid()


class UnitModule(Module):
    """Backbone + transmission head + light head + cast predictor."""

    def __init__(self, cfg: UnitModuleConfig | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg or UnitModuleConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        cs1, cs2 = self.cfg.stem_channels
        g = self.cfg.gn_groups
        self.stem = ModuleList([
            ConvNorm(3, cs1, 3, rng, stride=2, gn_groups=g),
            ConvNorm(cs1, cs2, 3, rng, stride=2, gn_groups=g),
        ])
        self.blocks = ModuleList([
            LKBlock(cs2, k, self.cfg, rng) for k in self.cfg.lk_kernels])
        self.thead = THead(cs2, self.cfg, rng)
        self.cast = CastPredictor(cs2, self.cfg, rng)
        self.merged_form = False

    # -- forward pieces ------------------------------------------------------

    def features(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError(f"expected [N,3,H,W] image, got {image.shape}")
        if image.shape[2] % 4 or image.shape[3] % 4:
            raise ConfigError(
                f"image size {image.shape[2]}x{image.shape[3]} must be divisible by 4")
        h = image
        for layer in self.stem:
            h = layer(h).relu()
        for block in self.blocks:
            h = block(h)
        return h

    def transmission(self, image: Tensor) -> Tensor:
        return self.thead(self.features(image))

    def enhance(self, image: Tensor, want_cast: bool = True
                ) -> tuple[Tensor, Tensor, Tensor, Tensor | None]:
        """Returns (enhanced, transmission, light, cast); cast only in
        training mode."""
        feats = self.features(image)
        t = self.thead(feats)
        light = physics.background_light(image)
        enhanced = physics.enhance(image, t, light, t_min=self.cfg.t_min)
        cast = self.cast(feats) if (self.training and want_cast) else None
        return enhanced, t, light, cast

    def __call__(self, image: Tensor) -> Tensor:
        return self.enhance(image, want_cast=False)[0]

    # -- bookkeeping ----------------------------------------------------------

    def inference_parameter_count(self) -> int:
        """Trainable parameters on the enhancement path (cast predictor
        excluded; it is dropped at inference)."""
        return sum(p.size for name, p in self.named_parameters()
                   if not name.startswith("cast."))

    def reparameterize(self) -> "UnitModule":
        """A merged inference-form copy; ``self`` is left untouched."""
        import copy

        new = copy.deepcopy(self)
        rng = np.random.default_rng(0)
        for block in new.blocks:
            block.merge(rng)
        del new.cast
        new.cast = None
        new.merged_form = True
        new.eval()
        return new


def module_from_state(state: dict, t_min: float = physics.DEFAULT_T_MIN) -> UnitModule:
    """Rebuild a training-form module from a checkpoint state dict; the
    architecture is inferred from the stored weight shapes."""
    try:
        cs1 = state["stem.0.conv.weight"].shape[0]
        cs2 = state["stem.1.conv.weight"].shape[0]
        kernels = tuple(int(state[f"blocks.{i}.dw_big.weight"].shape[2])
                        for i in range(2))
    except KeyError as exc:
        raise ContractError(f"checkpoint lacks module weights: {exc}") from exc
    mode = REPARAM_KEEP if "blocks.0.sum_norm.gamma" in state else REPARAM_FOLD
    cfg = UnitModuleConfig(stem_channels=(int(cs1), int(cs2)), lk_kernels=kernels,
                           t_min=t_min, reparam_mode=mode)
    module = UnitModule(cfg, np.random.default_rng(0))
    module.load_state_dict(state)
    return module
