"""Dense N-d tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy float array plus an optional gradient
buffer.  Operations record a closure-based tape (parents + backward rule)
whenever any input requires gradients; ``backward()`` on a scalar walks the
tape in reverse topological order and accumulates gradients into every
tracked leaf.  The operation set is deliberately minimal: exactly what the
image-formation model, the enhancement network, the losses and the toy
detector need.

Conventions
-----------
* Images and feature maps are ``[N, C, H, W]``, row-major.
* Convolution is cross-correlation (no kernel flip), zero padding.
* Default dtype is float32 with float32 accumulation.  ``use_dtype`` can
  switch new leaves to float64; this exists solely for tight
  finite-difference gradient checks.
* Broadcasting is restricted to: equal shapes, python scalars, a 1-d
  per-channel ``[C]`` operand against ``[N,C,H,W]``/``[N,C]``, and
  same-rank shapes where mismatched axes are 1 (e.g. ``[N,C,1,1]`` against
  ``[N,C,H,W]``).
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

_default_dtype = np.float32


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype of newly created leaf tensors."""
    global _default_dtype
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dtype!r}; use float32 or float64")
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Validate the limited broadcast contract; returns operands reshaped
    so plain numpy broadcasting does the right thing."""
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return a, b
    # per-channel [C] against [N,C,...]: lift to [1,C,1,...]
    if a.ndim == 1 and b.ndim >= 2:
        if a.shape[0] != b.shape[1]:
            raise DimensionError(
                f"per-channel operand has {a.shape[0]} channels, other has {b.shape[1]} (axis 1)")
        return a.reshape((1, a.shape[0]) + (1,) * (b.ndim - 2)), b
    if b.ndim == 1 and a.ndim >= 2:
        if b.shape[0] != a.shape[1]:
            raise DimensionError(
                f"per-channel operand has {b.shape[0]} channels, other has {a.shape[1]} (axis 1)")
        return a, b.reshape((1, b.shape[0]) + (1,) * (a.ndim - 2))
    if a.ndim != b.ndim:
        raise DimensionError(
            f"rank mismatch: {a.shape} vs {b.shape} (only scalar and per-channel "
            "broadcasts may change rank)")
    for ax, (sa, sb) in enumerate(zip(a.shape, b.shape)):
        if sa != sb and sa != 1 and sb != 1:
            raise DimensionError(f"axis {ax}: {sa} vs {sb} are incompatible")
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` by summing the
    expanded axes."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy-backed tensor that optionally records its producing op."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], op: str,
              backward: Callable[[np.ndarray], None] | None) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad)

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values, cut from the tape."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.op = "leaf"
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # own the buffer: g may alias another node's gradient
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def _set_backward(self, fn: Callable[[np.ndarray], None]) -> None:
        """Attach the backward rule only when the output is tracked."""
        if self.requires_grad:
            self._backward = fn

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar, accumulating into leaf ``grad``s.

        Non-leaf gradients are recomputed from scratch on every call; leaf
        gradients accumulate additively across calls until ``zero_grad``.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that is not connected "
                                "to any tracked leaf")
        order = topo_order(self)
        for node in order:
            if node._parents:
                node.grad = None  # non-leaf gradients are rebuilt per pass
        seed = np.ones(self.data.shape, dtype=self.data.dtype)
        if self._parents:
            self.grad = seed
        else:
            self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic --------------------------------------------

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._lift(other)
        a, b = _check_broadcast(self.data, other.data)
        out = Tensor._make(a + b, (self, other), "add", None)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, a.shape).reshape(self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, b.shape).reshape(other.shape))
        out._set_backward(bw)
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = _check_broadcast(self.data, other.data)
        out = Tensor._make(a - b, (self, other), "sub", None)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, a.shape).reshape(self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, b.shape).reshape(other.shape))
        out._set_backward(bw)
        return out

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __neg__(self):
        out = Tensor._make(-self.data, (self,), "neg", None)

        def bw(g):
            self._accumulate(-g)
        out._set_backward(bw)
        return out

    def __mul__(self, other):
        other = self._lift(other)
        a, b = _check_broadcast(self.data, other.data)
        out = Tensor._make(a * b, (self, other), "mul", None)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * b, a.shape).reshape(self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * a, b.shape).reshape(other.shape))
        out._set_backward(bw)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = _check_broadcast(self.data, other.data)
        out = Tensor._make(a / b, (self, other), "div", None)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / b, a.shape).reshape(self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * a / (b * b), b.shape).reshape(other.shape))
        out._set_backward(bw)
        return out

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    # -- elementwise nonlinearities -----------------------------------------

    def relu(self) -> "Tensor":
        out = Tensor._make(np.maximum(self.data, 0), (self,), "relu", None)

        def bw(g):
            self._accumulate(g * (self.data > 0))
        out._set_backward(bw)
        return out

    def sigmoid(self) -> "Tensor":
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        out = Tensor._make(y, (self,), "sigmoid", None)

        def bw(g):
            self._accumulate(g * y * (1.0 - y))
        out._set_backward(bw)
        return out

    def softplus(self) -> "Tensor":
        x = self.data
        y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
        out = Tensor._make(y, (self,), "softplus", None)

        def bw(g):
            s = np.empty_like(x)
            pos = x >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            s[~pos] = ex / (1.0 + ex)
            self._accumulate(g * s)
        out._set_backward(bw)
        return out

    def clamp_min(self, threshold: float) -> "Tensor":
        """max(x, threshold); gradient passes only where x > threshold."""
        out = Tensor._make(np.maximum(self.data, threshold), (self,), "clamp_min", None)

        def bw(g):
            self._accumulate(g * (self.data > threshold))
        out._set_backward(bw)
        return out

    def smooth_l1(self, beta: float = 1.0) -> "Tensor":
        """Elementwise Huber penalty: quadratic inside ``|x| < beta``."""
        x = self.data
        ax = np.abs(x)
        inner = ax < beta
        y = np.where(inner, 0.5 * x * x / beta, ax - 0.5 * beta)
        out = Tensor._make(y.astype(x.dtype), (self,), "smooth_l1", None)

        def bw(g):
            self._accumulate(g * np.clip(x / beta, -1.0, 1.0))
        out._set_backward(bw)
        return out

    # -- reductions and shape ops ---------------------------------------------

    def sum(self) -> "Tensor":
        out = Tensor._make(self.data.sum(dtype=self.data.dtype).reshape(()),
                           (self,), "sum", None)

        def bw(g):
            self._accumulate(np.broadcast_to(g, self.shape).astype(self.data.dtype))
        out._set_backward(bw)
        return out

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor._make(self.data.reshape(shape), (self,), "reshape", None)

        def bw(g):
            self._accumulate(g.reshape(self.shape))
        out._set_backward(bw)
        return out


def topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the recorded graph (parents first)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# structural operations
# ---------------------------------------------------------------------------

def _require_4d(t: Tensor, name: str) -> None:
    if t.ndim != 4:
        raise DimensionError(f"{name} must be 4-d [N,C,H,W], got {t.shape}")


def _conv_patches(x: np.ndarray, k: int, stride: int, padding: int):
    """Zero-pad and expose [N,C,K,K,Ho,Wo] sliding windows as a view."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    sn, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw), writeable=False)
    return patches, ho, wo


def _conv_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int,
              groups: int):
    """Forward cross-correlation on raw arrays.

    Returns (out, cols).  ``cols`` is the im2col buffer in
    ``[N, (groups,) C/g*K*K, L]`` layout, chosen so it is a plain
    (permutation-free) copy of the patch view and the product is one
    batched matmul; for 1x1 stride-1 convolutions it is a free view of the
    input.  Grouped and depthwise convolutions share the batched path with
    a groups axis.
    """
    n, cin = x.shape[:2]
    cout, _, k, _ = w.shape
    patches, ho, wo = _conv_patches(x, k, stride, padding)
    length = ho * wo
    if groups == 1:
        cols = np.ascontiguousarray(patches).reshape(n, cin * k * k, length)
        out = np.matmul(w.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
        return out, cols
    cpg_in, cpg_out = cin // groups, cout // groups
    cols = np.ascontiguousarray(patches).reshape(n, groups, cpg_in * k * k, length)
    wg = w.reshape(groups, cpg_out, cpg_in * k * k)
    out = np.matmul(wg, cols).reshape(n, cout, ho, wo)
    return out, cols


def _conv_grad_input(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     groups: int, x_shape) -> np.ndarray:
    """Input gradient of the cross-correlation, computed as another
    cross-correlation: dilate the output gradient by the stride and
    correlate it with the kernel rotated 180 degrees and transposed within
    each group.  Reuses the fastforward machinery."""
    n, cin, h, wdt = x_shape
    cout, cpg_in, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    if stride > 1:
        # trailing zeros re-create the strided positions a floor-divided
        # output size never visited
        rem_h = (h + 2 * padding - k) % stride
        rem_w = (wdt + 2 * padding - k) % stride
        gd = np.zeros((n, cout, (ho - 1) * stride + 1 + rem_h,
                       (wo - 1) * stride + 1 + rem_w), dtype=g.dtype)
        gd[:, :, 0:(ho - 1) * stride + 1:stride,
           0:(wo - 1) * stride + 1:stride] = g
    else:
        gd = g
    cpg_out = cout // groups
    wr = w.reshape(groups, cpg_out, cpg_in, k, k)[:, :, :, ::-1, ::-1]
    wt = np.ascontiguousarray(wr.transpose(0, 2, 1, 3, 4)).reshape(cin, cpg_out, k, k)
    gx, _ = _conv_raw(gd, wt, stride=1, padding=k - 1 - padding, groups=groups)
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation with square kernels and zero padding.

    ``weight`` is ``[Cout, Cin/groups, K, K]``.  Depthwise convolution is the
    ``groups == Cin == Cout`` case and takes a fast path.
    """
    _require_4d(x, "conv2d input")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-d, got {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if kh != kw:
        raise ConfigError(f"only square kernels supported, got {kh}x{kw}")
    if cin % groups != 0:
        raise DimensionError(f"input channels {cin} not divisible by groups {groups} (axis 1)")
    if cout % groups != 0:
        raise DimensionError(f"output channels {cout} not divisible by groups {groups} (axis 0)")
    if cin_g != cin // groups:
        raise DimensionError(
            f"weight expects {cin_g} channels per group, input provides {cin // groups} (axis 1)")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},) (axis 0)")
    k = kh
    if padding > k - 1:
        raise ConfigError(f"padding {padding} larger than kernel-1 ({k - 1})")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"kernel {k} with padding {padding} does not fit input {h}x{w} (axis 2)")

    out_data, cols = _conv_raw(x.data, weight.data, stride, padding, groups)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._make(out_data, parents, "conv2d", None)
    if not out.requires_grad:
        return out

    def bw(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            if groups == 1:
                gm = g.reshape(n, cout, ho * wo)
                gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            else:
                gm = g.reshape(n, groups, cout // groups, ho * wo)
                gw = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            weight._accumulate(gw.reshape(weight.shape))
        if x.requires_grad:
            x._accumulate(_conv_grad_input(np.ascontiguousarray(g), weight.data,
                                           stride, padding, groups, x.shape))
    out._set_backward(bw)
    return out


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group normalization followed by a channel affine."""
    _require_4d(x, "group_norm input")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ConfigError(f"channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must be [{c}], got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    m = (c // groups) * h * w
    xg = x.data.reshape(n, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out_data = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    out = Tensor._make(out_data, (x, gamma, beta), "group_norm", None)
    if not out.requires_grad:
        return out

    def bw(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = (g * gamma.data.reshape(1, c, 1, 1)).reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            mean_gh = gh.mean(axis=2, keepdims=True)
            mean_ghx = (gh * xh).mean(axis=2, keepdims=True)
            gx = inv * (gh - mean_gh - xh * mean_ghx)
            x._accumulate(gx.reshape(n, c, h, w))
    out._set_backward(bw)
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block; backward sums the block."""
    _require_4d(x, "upsample input")
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    out = Tensor._make(out_data, (x,), "upsample_nearest2x", None)

    def bw(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    out._set_backward(bw)
    return out


def channel_mean(x: Tensor) -> Tensor:
    """Spatial mean per sample and channel: ``[N,C,H,W] -> [N,C]``."""
    _require_4d(x, "channel_mean input")
    n, c, h, w = x.shape
    out = Tensor._make(x.data.mean(axis=(2, 3)), (x,), "channel_mean", None)

    def bw(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape)
                      .astype(x.data.dtype, copy=False))
    out._set_backward(bw)
    return out


def channel_sum(x: Tensor) -> Tensor:
    """Sum over the channel axis with keepdims: ``[N,C,H,W] -> [N,1,H,W]``."""
    _require_4d(x, "channel_sum input")
    out = Tensor._make(x.data.sum(axis=1, keepdims=True), (x,), "channel_sum", None)

    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False))
    out._set_backward(bw)
    return out


def logsumexp_channel(x: Tensor) -> Tensor:
    """Numerically stable log-sum-exp over the channel axis (keepdims)."""
    _require_4d(x, "logsumexp input")
    m = x.data.max(axis=1, keepdims=True)
    ex = np.exp(x.data - m)
    s = ex.sum(axis=1, keepdims=True)
    out_data = m + np.log(s)
    out = Tensor._make(out_data, (x,), "logsumexp_channel", None)

    def bw(g):
        x._accumulate(g * (ex / s))
    out._set_backward(bw)
    return out


_POOL_BINS_CACHE: dict[tuple[int, int], list[tuple[int, int]]] = {}


def _pool_bins(size: int, out: int) -> list[tuple[int, int]]:
    key = (size, out)
    bins = _POOL_BINS_CACHE.get(key)
    if bins is None:
        bins = [(int(np.floor(i * size / out)), int(np.ceil((i + 1) * size / out)))
                for i in range(out)]
        _POOL_BINS_CACHE[key] = bins
    return bins


def adaptive_avg_pool(x: Tensor, out_size: int = 7) -> Tensor:
    """Average-pool to ``out_size`` x ``out_size`` with floor/ceil bin edges.

    The whole feature map is treated as the single region of interest.
    """
    _require_4d(x, "adaptive_avg_pool input")
    n, c, h, w = x.shape
    if h < out_size or w < out_size:
        raise ConfigError(
            f"adaptive_avg_pool needs input >= {out_size}, got {h}x{w}")
    rows = _pool_bins(h, out_size)
    cols = _pool_bins(w, out_size)
    out_data = np.empty((n, c, out_size, out_size), dtype=x.data.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out_data[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    out = Tensor._make(out_data, (x,), "adaptive_avg_pool", None)

    def bw(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += g[:, :, i, j][:, :, None, None] / area
        x._accumulate(gx)
    out._set_backward(bw)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``[M,F] @ [G,F]^T (+ [G]) -> [M,G]``."""
    if x.ndim != 2:
        raise DimensionError(f"linear input must be 2-d [M,F], got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"weight {weight.shape} incompatible with input {x.shape} (axis 1)")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data = out_data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._make(out_data, parents, "linear", None)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
    out._set_backward(bw)
    return out


def narrow_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice channels [start, stop) of a 4-d tensor; backward scatters."""
    _require_4d(x, "narrow_channels input")
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(
            f"channel slice [{start}:{stop}] out of range for {x.shape[1]} channels (axis 1)")
    out = Tensor._make(x.data[:, start:stop], (x,), "narrow_channels", None)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        x._accumulate(gx)
    out._set_backward(bw)
    return out


def spatial_diff(x: Tensor, axis: int) -> Tensor:
    """Forward difference along H (axis=2) or W (axis=3)."""
    _require_4d(x, "spatial_diff input")
    if axis not in (2, 3):
        raise ConfigError(f"spatial_diff axis must be 2 or 3, got {axis}")
    if x.shape[axis] < 2:
        raise DimensionError(f"axis {axis} must have extent >= 2, got {x.shape[axis]}")
    if axis == 2:
        out_data = x.data[:, :, 1:, :] - x.data[:, :, :-1, :]
    else:
        out_data = x.data[:, :, :, 1:] - x.data[:, :, :, :-1]
    out = Tensor._make(out_data, (x,), "spatial_diff", None)

    def bw(g):
        gx = np.zeros_like(x.data)
        if axis == 2:
            gx[:, :, 1:, :] += g
            gx[:, :, :-1, :] -= g
        else:
            gx[:, :, :, 1:] += g
            gx[:, :, :, :-1] -= g
        x._accumulate(gx)
    out._set_backward(bw)
    return out


# ---------------------------------------------------------------------------
# binary tensor file ("UMT1")
# ---------------------------------------------------------------------------

_MAGIC = b"UMT1"


def write_array(fh, arr: np.ndarray) -> None:
    """Write one array in UMT1 framing to a binary stream (as float32 LE)."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.astype("<f4", copy=False).tobytes())


def read_array(fh) -> np.ndarray:
    """Read one UMT1-framed array from a binary stream."""
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ContractError(f"bad tensor magic {magic!r}, expected {_MAGIC!r}")
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ContractError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor(read_array(fh))
