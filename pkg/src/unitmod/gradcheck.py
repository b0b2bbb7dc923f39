"""Central finite-difference verification of autodiff gradients.

``check_gradients`` compares the tape's gradients for a scalar-valued
computation against central differences computed by perturbing leaf values
in place.  Checks are meant to run under ``use_dtype(np.float64)`` so the
difference quotient itself is trustworthy at tight tolerances; the relative
error is ``|ad - fd| / max(|ad|, |fd|, scale)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    tol: float
    max_rel_err: float = 0.0
    worst_leaf: str = ""
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def row(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{self.name:<28} {status:<5} max_rel_err={self.max_rel_err:.3e} "
                f"tol={self.tol:.1e} ({self.checked} entries)")


def _eval(build: Callable[[], Tensor]) -> float:
    out = build()
    return float(out.data.reshape(()))


def check_gradients(name: str,
                    build: Callable[[], Tensor],
                    leaves: Sequence[tuple[str, Tensor]],
                    h: float = 1e-3,
                    tol: float = 1e-3,
                    max_entries: int | None = None,
                    rng: np.random.Generator | None = None,
                    scale: float = 1.0) -> GradCheckResult:
    """Check d(build())/d(leaf) for every listed leaf against central FD.

    ``build`` must recompute the forward pass from the leaves' current
    ``data``; leaves are perturbed in place and restored.  When
    ``max_entries`` is given, that many positions per leaf are sampled with
    ``rng`` instead of sweeping every element.
    """
    result = GradCheckResult(name=name, tol=tol)
    for leaf_name, leaf in leaves:
        leaf.zero_grad()
    loss = build()
    loss.backward()
    for leaf_name, leaf in leaves:
        if leaf.grad is None:
            raise AssertionError(f"{name}: no gradient reached leaf {leaf_name!r}")
        flat = leaf.data.reshape(-1)
        n = flat.size
        if max_entries is not None and max_entries < n:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_entries, replace=False)
        else:
            idxs = np.arange(n)
        gflat = leaf.grad.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _eval(build)
            flat[i] = orig - h
            f_minus = _eval(build)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = float(gflat[i])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), scale)
            result.checked += 1
            if rel > result.max_rel_err:
                result.max_rel_err = rel
                result.worst_leaf = f"{leaf_name}[{i}]"
    return result


def standard_suite(module: str = "all", tol: float = 1e-3,
                   h: float = 1e-3) -> list[GradCheckResult]:
    """The library's own gradient checks, run in float64.

    ``module`` picks a subset: tensor (primitive ops), losses, net (the
    enhancement network composite), or all.
    """
    from . import losses as lo
    from . import tensor as te
    from .errors import ConfigError

    if module not in ("all", "tensor", "losses", "net"):
        raise ConfigError(f"unknown gradcheck module {module!r}")
    results: list[GradCheckResult] = []
    rng = np.random.default_rng(20240)

    with te.use_dtype(np.float64):
        if module in ("all", "tensor"):
            x = Tensor(rng.uniform(0.2, 1.0, size=(2, 4, 8, 8)), requires_grad=True)
            w_dw = Tensor(rng.uniform(-0.5, 0.5, size=(4, 1, 3, 3)), requires_grad=True)
            w_pw = Tensor(rng.uniform(-0.5, 0.5, size=(6, 4, 1, 1)), requires_grad=True)
            gamma = Tensor(rng.uniform(0.5, 1.5, size=(4,)), requires_grad=True)
            beta = Tensor(rng.uniform(-0.5, 0.5, size=(4,)), requires_grad=True)
            wl = Tensor(rng.uniform(-0.5, 0.5, size=(3, 8)), requires_grad=True)
            checks = {
                "conv2d_depthwise": (lambda: te.conv2d(x, w_dw, stride=1, padding=1,
                                                       groups=4).sum(),
                                     [("x", x), ("w", w_dw)]),
                "conv2d_pointwise": (lambda: (lambda y: (y * y).sum())(
                    te.conv2d(x, w_pw)), [("x", x), ("w", w_pw)]),
                "group_norm": (lambda: (te.group_norm(x, 2, gamma, beta)
                                        .sigmoid()).sum(),
                               [("x", x), ("gamma", gamma), ("beta", beta)]),
                "sigmoid_softplus": (lambda: (x.sigmoid().softplus() * x).sum(),
                                     [("x", x)]),
                "upsample_nearest2x": (lambda: (lambda y: (y * y).sum())(
                    te.upsample_nearest2x(x)), [("x", x)]),
                "adaptive_avg_pool": (lambda: (lambda y: (y * y).sum())(
                    te.adaptive_avg_pool(x)), [("x", x)]),
                "channel_mean": (lambda: (lambda y: (y * y).sum())(
                    te.channel_mean(x)), [("x", x)]),
                "linear": (lambda: (lambda y: (y * y).sum())(
                    te.linear(x.reshape(64, 8), wl)), [("x", x), ("w", wl)]),
                "spatial_diff": (lambda: ((te.spatial_diff(x, 2) * te.spatial_diff(x, 2)).sum()
                                          + (te.spatial_diff(x, 3) * te.spatial_diff(x, 3)).sum()),
                                 [("x", x)]),
                "logsumexp_channel": (lambda: (te.logsumexp_channel(x)
                                               * te.channel_sum(x)).sum(), [("x", x)]),
            }
            for name, (build, leaves) in checks.items():
                results.append(check_gradients(name, build, leaves, h=h, tol=tol,
                                               max_entries=24, rng=rng))

        if module in ("all", "losses"):
            j = Tensor(rng.uniform(0.05, 0.95, size=(1, 3, 8, 8)), requires_grad=True)
            jp = Tensor(rng.uniform(-0.3, 1.3, size=(1, 3, 8, 8)), requires_grad=True)
            jp.data[np.abs(jp.data) < 0.02] = 0.05
            jp.data[np.abs(jp.data - 1) < 0.02] = 0.95
            t1 = Tensor(rng.uniform(0.2, 0.9, size=(1, 3, 8, 8)), requires_grad=True)
            t2 = Tensor(rng.uniform(0.2, 0.9, size=(1, 3, 8, 8)), requires_grad=True)
            c_hat = Tensor(rng.uniform(0.1, 0.9, size=(1, 3)), requires_grad=True)
            light = Tensor(rng.uniform(0.1, 0.9, size=(1, 3)))
            loss_checks = {
                "transmission_loss": (lambda: lo.transmission_loss(t1, t2, 0.9),
                                      [("t1", t1), ("t2", t2)]),
                "saturated_pixel_loss": (lambda: lo.saturated_pixel_loss(j, jp),
                                         [("j", j), ("jp", jp)]),
                "total_variation_loss": (lambda: lo.total_variation_loss(j), [("j", j)]),
                "color_cast_loss": (lambda: lo.color_cast_loss(j), [("j", j)]),
                "assisting_color_cast_loss": (
                    lambda: lo.assisting_color_cast_loss(c_hat, light),
                    [("c_hat", c_hat)]),
            }
            for name, (build, leaves) in loss_checks.items():
                results.append(check_gradients(name, build, leaves, h=h, tol=tol,
                                               max_entries=32, rng=rng))

        if module in ("all", "net"):
            from . import physics
            from .net import UnitModule, UnitModuleConfig

            cfg = UnitModuleConfig(stem_channels=(8, 8), lk_kernels=(5, 5))
            unit = UnitModule(cfg, np.random.default_rng(3))
            img = Tensor(rng.uniform(0.1, 0.9, size=(1, 3, 28, 28)))

            def build_net():
                enhanced, t1, light, cast = unit.enhance(img)
                lc = light.detach()
                j2 = physics.alpha_degrade(img, 0.9, lc)
                enhanced2, t2, _, _ = unit.enhance(j2, want_cast=False)
                w = lo.LossWeights()
                total, _ = lo.unit_module_loss(
                    lo.transmission_loss(t1, t2, 0.9),
                    lo.saturated_pixel_loss(enhanced, enhanced2),
                    lo.total_variation_loss(enhanced),
                    lo.color_cast_loss(enhanced),
                    lo.assisting_color_cast_loss(cast, lc), w)
                return total

            leaves = list(unit.named_parameters())
            # composites need a sub-kink step: see the gradcheck notes in
            # the acceptance suite
            results.append(check_gradients("unit_module_composite", build_net, leaves,
                                           h=1e-7, tol=max(tol, 1e-2),
                                           max_entries=2, rng=rng))
    return results
