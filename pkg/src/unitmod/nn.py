"""A very small layer system on top of the tensor engine.

Modules auto-register parameters (Tensor attributes), buffers and child
modules, giving every weight a dotted path name (``stem.0.conv.weight``)
used by checkpoints.  Initialization draws come from an explicit
``numpy.random.Generator`` so construction is reproducible.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def __delattr__(self, name):
        self._params.pop(name, None)
        self._children.pop(name, None)
        self._buffers.pop(name, None)
        object.__delattr__(self, name)

    def register_buffer(self, name, array: np.ndarray) -> None:
        """Non-learnable state saved in checkpoints (e.g. running stats)."""
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def set_buffer(self, name, array: np.ndarray) -> None:
        if name not in self._buffers:
            raise ContractError(f"unknown buffer {name!r}")
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    # -- traversal ----------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, flag: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- (de)serialization ----------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p in self.named_parameters()}
        for m_prefix, m in self._walk_prefixed():
            for bname in list(m._buffers):
                own[m_prefix + bname] = (m, bname)
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ContractError(
                f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, target in own.items():
            arr = np.asarray(state[name])
            if isinstance(target, Tensor):
                if target.data.shape != arr.shape:
                    raise ContractError(
                        f"shape mismatch for {name}: {target.data.shape} vs {arr.shape}")
                target.data = arr.astype(target.data.dtype).copy()
            else:
                m, bname = target
                m.set_buffer(bname, arr.astype(m._buffers[bname].dtype).copy())

    def _walk_prefixed(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child._walk_prefixed(f"{prefix}{name}.")


class ModuleList(Module):
    def __init__(self, items):
        super().__init__()
        self._items = list(items)
        for i, m in enumerate(self._items):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = float(np.sqrt(6.0 / fan_in))
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data.astype(T.default_dtype()), requires_grad=True)


class Conv2d(Module):
    """Square-kernel convolution; bias only when not followed by a norm."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, groups: int = 1,
                 bias: bool = False, bias_init: float = 0.0):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        fan_in = (cin // groups) * k * k
        self.weight = uniform_fan_in(rng, (cout, cin // groups, k, k), fan_in)
        if bias:
            self.bias = Tensor(np.full(cout, bias_init, dtype=T.default_dtype()),
                               requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.weight = uniform_fan_in(rng, (fout, fin), fin)
        if bias:
            self.bias = Tensor(np.zeros(fout, dtype=T.default_dtype()),
                               requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    """Group normalization with a learnable channel affine.

    With ``track_stats=True`` the layer also keeps exponentially averaged
    per-group statistics during training and uses them as a frozen channel
    affine in eval mode; only such layers can be folded into a preceding
    convolution at re-parameterization time.
    """

    def __init__(self, channels: int, groups: int, eps: float = 1e-5,
                 track_stats: bool = False, momentum: float = 0.99):
        super().__init__()
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.track_stats = track_stats
        self.momentum = momentum
        dt = T.default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        if track_stats:
            self.register_buffer("running_mean", np.zeros(groups, dtype=dt))
            self.register_buffer("running_var", np.ones(groups, dtype=dt))

    def _update_stats(self, x: Tensor) -> None:
        n = x.shape[0]
        xg = x.data.reshape(n, self.groups, -1)
        mean = xg.mean(axis=2).mean(axis=0)
        var = xg.var(axis=2).mean(axis=0)
        m = self.momentum
        self.running_mean *= m
        self.running_mean += (1.0 - m) * mean.astype(self.running_mean.dtype)
        self.running_var *= m
        self.running_var += (1.0 - m) * var.astype(self.running_var.dtype)

    def frozen_affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, bias) equivalent of the frozen-statistics
        normalization; defined only for ``track_stats`` layers."""
        if not self.track_stats:
            raise ContractError("frozen_affine on a layer without running stats")
        rep = self.channels // self.groups
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = self.gamma.data * np.repeat(inv, rep)
        bias = self.beta.data - np.repeat(self.running_mean * inv, rep) * self.gamma.data
        return scale, bias

    def __call__(self, x: Tensor) -> Tensor:
        if self.track_stats and not self.training:
            scale, bias = self.frozen_affine()
            return x * Tensor(scale) + Tensor(bias)
        if self.track_stats and self.training:
            self._update_stats(x)
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class ConvNorm(Module):
    """Convolution (bias-free) followed by group normalization.

    Activation placement differs between call sites, so the ReLU is left to
    the caller.
    """

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, groups: int = 1, gn_groups: int = 8,
                 track_stats: bool = False, momentum: float = 0.99):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, groups=groups)
        self.norm = GroupNorm(cout, gn_groups, track_stats=track_stats,
                              momentum=momentum)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))
