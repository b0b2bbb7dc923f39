"""Joint training of the enhancement module with the toy detector.

Every step runs the two-branch unsupervised scheme: the batch J1 is
enhanced (giving t1, the background light A and the cast prediction), a
further-degraded copy J2 = a*J1 + (1-a)*A goes through the same module
(shared weights) giving t2 and a second enhanced image, and one backward
pass optimizes the weighted module losses plus the detector loss computed
on the enhanced J1.  A is treated as a constant when building J2 and when
used as the cast label.

Loss scale: the pixel-summed terms (transmission, saturated-pixel, total
variation) grow with image area, which at any realistic resolution puts
them orders of magnitude above the detector loss under the published
weights.  The harness therefore divides those three terms by the pixel
count H*W (``loss_pixel_norm``, on by default), which keeps both loss
groups in the same order of magnitude and SGD stable; the loss functions
themselves keep their pixel-sum semantics.

Optimizer: SGD with momentum and weight decay, linear warmup then cosine
annealing to zero.  Checkpoints are written at epoch boundaries and carry
parameters, norm running statistics, momentum buffers, the step/epoch
counters and the data-ordering RNG state, so a resumed run replays an
uninterrupted one bit for bit.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import checkpoint as ckpt
from . import detector as det
from . import losses as L
from . import physics
from .detector import ToyDetector
from .errors import ConfigError, TrainingAbort
from .losses import LossReport, LossWeights
from .metrics import gray_world_deviation, psnr
from .net import UnitModule, UnitModuleConfig
from .synth import SyntheticSample
from .tensor import Tensor
from .ucrt import UcrtConfig, ucrt
from .util import read_config


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    warmup_iters: int = 100
    alpha: float = physics.DEFAULT_ALPHA
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    unitmodule_enabled: bool = True
    ucrt_enabled: bool = False
    loss_pixel_norm: bool = True
    both_branch_tv_cc: bool = True
    stem_channels: tuple[int, int] = (32, 32)
    lk_kernels: tuple[int, int] = (9, 9)
    t_min: float = physics.DEFAULT_T_MIN
    val_every: int = 1
    checkpoint_every: int = 10
    score_thresh: float = 0.3
    ema_decay: float = 0.0  # stub: weight averaging is not implemented

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0,1), got {self.alpha}")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.ema_decay != 0.0:
            raise ConfigError("ema_decay is a stub; only 0.0 is supported")

    def net_config(self) -> UnitModuleConfig:
        return UnitModuleConfig(stem_channels=self.stem_channels,
                                lk_kernels=self.lk_kernels, t_min=self.t_min)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        raw = read_config(path)
        kwargs = {}
        weights = LossWeights()
        bool_keys = {"unitmodule_enabled", "ucrt_enabled", "loss_pixel_norm",
                     "both_branch_tv_cc"}
        int_keys = {"epochs", "batch_size", "warmup_iters", "seed", "val_every",
                    "checkpoint_every"}
        float_keys = {"lr", "momentum", "weight_decay", "alpha", "t_min",
                      "score_thresh", "ema_decay"}
        for key, value in raw.items():
            if key in ("train_data", "val_data", "out"):
                continue
            if key in ("w1", "w2", "w3", "w4", "w5"):
                weights = replace(weights, **{key: float(value)})
            elif key in bool_keys:
                kwargs[key] = value.lower() in ("1", "true", "yes", "on")
            elif key in int_keys:
                kwargs[key] = int(value)
            elif key in float_keys:
                kwargs[key] = float(value)
            elif key in ("stem_channels", "lk_kernels"):
                parts = [int(v) for v in value.replace(",", " ").split()]
                if len(parts) != 2:
                    raise ConfigError(f"{key} needs two integers, got {value!r}")
                kwargs[key] = tuple(parts)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(weights=weights, **kwargs)


def cosine_warmup_lr(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base_lr`` then cosine annealing to zero."""
    if warmup >= total:
        raise ConfigError(f"warmup ({warmup}) must be shorter than the run ({total})")
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def _finite_or_abort(value: float, term: str, tensors: dict[str, Tensor]) -> None:
    if np.isfinite(value):
        return
    bad_index = -1
    for t in tensors.values():
        finite = np.isfinite(t.data.reshape(t.shape[0], -1)).all(axis=1)
        if not finite.all():
            bad_index = int(np.argmin(finite))
            break
    raise TrainingAbort(
        f"non-finite loss term {term!r} (batch index {bad_index}); step aborted")


class Trainer:
    """Owns both models, the optimizer state and the data-order RNG."""

    def __init__(self, config: TrainConfig):
        self.config = config
        root = np.random.SeedSequence(config.seed)
        det_seq, unit_seq, stream_seq = root.spawn(3)
        self.detector = ToyDetector(np.random.default_rng(det_seq))
        self.unit = (UnitModule(config.net_config(), np.random.default_rng(unit_seq))
                     if config.unitmodule_enabled else None)
        self.stream = np.random.default_rng(stream_seq)
        self.step_count = 0
        self.epoch = 0
        self._velocity = {name: np.zeros_like(p.data)
                          for name, p in self._named_params()}

    def _named_params(self):
        for name, p in self.detector.named_parameters():
            yield "det." + name, p
        if self.unit is not None:
            for name, p in self.unit.named_parameters():
                yield "unit." + name, p

    # -- one optimization step -------------------------------------------------

    def train_step(self, images: np.ndarray, boxes: list[list[det.Box]],
                   lr: float) -> LossReport:
        cfg = self.config
        j1 = Tensor(images)
        if self.unit is not None:
            self.unit.train()
            enhanced, t1, light, cast = self.unit.enhance(j1, want_cast=True)
            light_const = light.detach()
            j2 = physics.alpha_degrade(j1, cfg.alpha, light_const)
            enhanced2, t2, _, _ = self.unit.enhance(j2, want_cast=False)

            l_t = L.transmission_loss(t1, t2, cfg.alpha)
            l_sp = L.saturated_pixel_loss(enhanced, enhanced2)
            l_tv = L.total_variation_loss(enhanced)
            l_cc = L.color_cast_loss(enhanced)
            if cfg.both_branch_tv_cc:
                l_tv = l_tv + L.total_variation_loss(enhanced2)
                l_cc = l_cc + L.color_cast_loss(enhanced2)
            l_acc = L.assisting_color_cast_loss(cast, light_const)
            if cfg.loss_pixel_norm:
                inv_px = 1.0 / (images.shape[2] * images.shape[3])
                l_t = l_t * inv_px
                l_sp = l_sp * inv_px
                l_tv = l_tv * inv_px
            um_total, report = L.unit_module_loss(l_t, l_sp, l_tv, l_cc, l_acc,
                                                  cfg.weights)
            for term, value in (("l_t", report.l_t), ("l_sp", report.l_sp),
                                ("l_tv", report.l_tv), ("l_cc", report.l_cc),
                                ("l_acc", report.l_acc)):
                _finite_or_abort(value, term,
                                 {"enhanced": enhanced, "t1": t1, "t2": t2})
            detector_input = enhanced
        else:
            um_total = None
            report = LossReport()
            detector_input = j1

        grid = self.detector(detector_input)
        l_det = det.detector_loss(grid, boxes)
        _finite_or_abort(l_det.item(), "l_detector", {"grid": grid})
        total = l_det if um_total is None else um_total + l_det

        self.detector.zero_grad()
        if self.unit is not None:
            self.unit.zero_grad()
        total.backward()
        self._sgd_update(lr)

        report.step = self.step_count
        report.l_detector = l_det.item()
        report.l_total = total.item()
        self.step_count += 1
        return report

    def _sgd_update(self, lr: float) -> None:
        cfg = self.config
        for name, p in self._named_params():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = g + cfg.weight_decay * p.data
            v = self._velocity[name]
            v *= cfg.momentum
            v += g
            p.data -= np.asarray(lr * v, dtype=p.data.dtype)

    # -- checkpointing ----------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        for name, arr in self.detector.state_dict().items():
            state["det." + name] = arr
        if self.unit is not None:
            for name, arr in self.unit.state_dict().items():
                state["unit." + name] = arr
        for name, v in self._velocity.items():
            state["opt." + name] = v
        state["trainer.step"] = ckpt.scalar_entry(self.step_count)
        state["trainer.epoch"] = ckpt.scalar_entry(self.epoch)
        state["trainer.rng_state"] = ckpt.encode_rng_state(self.stream)
        return state

    def save(self, path) -> None:
        ckpt.save_state(path, self.state())

    def load(self, path) -> None:
        state = ckpt.load_state(path)
        self.detector.load_state_dict(
            {k[len("det."):]: v for k, v in state.items() if k.startswith("det.")})
        if self.unit is not None:
            unit_state = {k[len("unit."):]: v for k, v in state.items()
                          if k.startswith("unit.")}
            self.unit.load_state_dict(unit_state)
        for name in self._velocity:
            self._velocity[name] = state["opt." + name].astype(np.float32).copy()
        self.step_count = int(state["trainer.step"][0])
        self.epoch = int(state["trainer.epoch"][0])
        self.stream = ckpt.decode_rng_state(state["trainer.rng_state"])


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def fit(train_samples: list[SyntheticSample], config: TrainConfig,
        val_samples: list[SyntheticSample] | None = None,
        out_dir=None, trainer: Trainer | None = None,
        log=print) -> tuple[Trainer, list[str], list[str]]:
    """Run the epoch loop; returns the trainer and the history/validation
    CSV rows (also written to ``out_dir`` when given)."""
    if not train_samples:
        raise ConfigError("training dataset is empty")
    n = len(train_samples)
    total_steps = config.epochs * steps_per_epoch(n, config.batch_size)
    cosine_warmup_lr(0, config.lr, config.warmup_iters, total_steps)  # validates warmup
    trainer = trainer or Trainer(config)
    ucrt_cfg = UcrtConfig() if config.ucrt_enabled else None

    history: list[str] = [LossReport.CSV_HEADER]
    val_rows: list[str] = ["epoch,mean_ap,psnr_enhanced,psnr_degraded,gray_world_dev"]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(trainer.epoch, config.epochs):
        perm = trainer.stream.permutation(n)
        aug_seed = int(trainer.stream.integers(1 << 31)) if config.ucrt_enabled else 0
        for batch_idx in _batches(n, config.batch_size):
            chosen = perm[batch_idx]
            imgs = []
            boxes = []
            for j in chosen:
                s = train_samples[j]
                img = s.degraded
                if ucrt_cfg is not None:
                    rng = np.random.default_rng(
                        np.random.SeedSequence(entropy=aug_seed, spawn_key=(int(j),)))
                    img = ucrt(img, ucrt_cfg, rng)
                imgs.append(img)
                boxes.append(s.boxes)
            batch = np.stack(imgs).astype(np.float32)
            lr = cosine_warmup_lr(trainer.step_count, config.lr,
                                  config.warmup_iters, total_steps)
            report = trainer.train_step(batch, boxes, lr)
            history.append(report.csv_row())
        trainer.epoch = epoch + 1

        if val_samples and (epoch + 1) % config.val_every == 0:
            metrics = evaluate(trainer.unit, trainer.detector, val_samples,
                               batch_size=config.batch_size,
                               score_thresh=config.score_thresh)
            val_rows.append(f"{epoch},{metrics['mean_ap']:.6f},"
                            f"{metrics['psnr_enhanced']:.6f},"
                            f"{metrics['psnr_degraded']:.6f},"
                            f"{metrics['gray_world_dev']:.6f}")
            log(f"epoch {epoch}: mAP={metrics['mean_ap']:.3f} "
                f"psnr_enh={metrics['psnr_enhanced']:.2f} "
                f"psnr_deg={metrics['psnr_degraded']:.2f}")

        if out_dir is not None:
            _write_rows(os.path.join(out_dir, "history.csv"), history)
            _write_rows(os.path.join(out_dir, "validation.csv"), val_rows)
            if (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.epochs:
                trainer.save(os.path.join(out_dir, f"ckpt_{epoch + 1:03d}.umck"))
    if out_dir is not None:
        trainer.save(os.path.join(out_dir, "final.umck"))
    return trainer, history, val_rows


def _write_rows(path, rows: list[str]) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def evaluate(unit: UnitModule | None, detector_model: ToyDetector,
             samples: list[SyntheticSample], batch_size: int = 8,
             score_thresh: float = 0.3) -> dict:
    """Detection AP plus enhancement quality on a sample list.

    PSNR compares the export-clipped enhanced image against the stored
    clean image; the detector itself consumes the raw (unclipped) output.
    """
    was_training_det = detector_model.training
    detector_model.eval()
    if unit is not None:
        was_training_unit = unit.training
        unit.eval()
    detections: list[list[det.Detection]] = []
    gts: list[list[det.Box]] = []
    psnr_enh: list[float] = []
    psnr_deg: list[float] = []
    gw: list[float] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = np.stack([s.degraded for s in chunk]).astype(np.float32)
        images = Tensor(batch)
        if unit is not None:
            enhanced = unit.enhance(images, want_cast=False)[0]
            det_input = enhanced
            enh_np = enhanced.data
        else:
            det_input = images
            enh_np = batch
        grid = detector_model(det_input)
        for i, s in enumerate(chunk):
            detections.append(det.decode_and_nms(grid.data[i], score_thresh))
            gts.append(s.boxes)
            clipped = np.clip(enh_np[i], 0.0, 1.0)
            psnr_enh.append(psnr(clipped, s.clean))
            psnr_deg.append(psnr(s.degraded, s.clean))
            gw.append(gray_world_deviation(clipped))
    per_class, mean_ap = det.average_precision(detections, gts)
    if unit is not None and was_training_unit:
        unit.train()
    if was_training_det:
        detector_model.train()
    return {
        "per_class_ap": per_class,
        "mean_ap": mean_ap,
        "psnr_enhanced": float(np.mean(psnr_enh)),
        "psnr_degraded": float(np.mean(psnr_deg)),
        "gray_world_dev": float(np.mean(gw)),
        "detections": detections,
    }
