"""Command-line entry point.

Subcommands cover the whole workflow: synthesize a dataset, train jointly,
enhance images with a trained checkpoint, augment a dataset, evaluate
detection/enhancement quality, run the gradient-check suite, and survey
hue statistics.  Everything is deterministic given its seed flags.

Exit codes: 0 success, 1 contract/configuration error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt
from . import detector as det
from . import imgio, synth, train
from .errors import (ConfigError, ContractError, DatasetError, DimensionError,
                     TrainingAbort, UnitmodError)
from .gradcheck import standard_suite
from .metrics import gray_world_deviation, psnr
from .net import module_from_state
from .tensor import Tensor
from .ucrt import UcrtConfig, hue_stats, rgb_to_hsv, ucrt
from .util import read_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unitmod",
        description="Physics-guided joint image enhancement: synthetic data, "
                    "training, inference and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic detection dataset")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="square image size (32..256)")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="jointly train enhancement and detector")
    p.add_argument("--config", required=True,
                   help="key = value config file; must name train_data")
    p.add_argument("--out", required=True, help="run directory for history and checkpoints")

    p = sub.add_parser("enhance", help="enhance images with a trained checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file (.umck)")
    p.add_argument("--in", dest="input", required=True,
                   help="directory of PNGs (a dataset dir uses its degraded/ images)")
    p.add_argument("--out", required=True, help="output directory for enhanced PNGs")
    p.add_argument("--dump-t", action="store_true",
                   help="also write the transmission map as PNG and the "
                        "background light as text")

    p = sub.add_parser("augment", help="apply the color transfer to a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for augmented PNGs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hue-min", type=float, default=18.0)
    p.add_argument("--hue-max", type=float, default=116.0)
    p.add_argument("--h-jitter", type=float, default=5.0)
    p.add_argument("--sv-jitter", type=float, default=30.0)
    p.add_argument("--prob", type=float, default=0.5)

    p = sub.add_parser("eval", help="report detection and enhancement metrics")
    p.add_argument("--ckpt", required=True, help="checkpoint file (.umck)")
    p.add_argument("--data", required=True, help="dataset directory")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--with-unitmodule", dest="with_unit", action="store_true",
                       default=True, help="enhance before detecting (default)")
    group.add_argument("--without-unitmodule", dest="with_unit", action="store_false",
                       help="feed degraded images straight to the detector")
    p.add_argument("--score-thresh", type=float, default=0.3)
    p.add_argument("--dump-detections", default=None,
                   help="write detections CSV to this path")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", choices=["all", "tensor", "losses", "net"],
                   default="all")
    p.add_argument("--tol", type=float, default=1e-3,
                   help="relative-error tolerance")

    p = sub.add_parser("hue-stats", help="hue-mean survey over an image folder")
    p.add_argument("--dir", required=True, help="folder scanned for .png images")
    return parser


def _png_paths(folder: str) -> list[str]:
    if os.path.isdir(os.path.join(folder, "degraded")):
        folder = os.path.join(folder, "degraded")
    names = sorted(n for n in os.listdir(folder) if n.lower().endswith(".png"))
    if not names:
        raise DatasetError(f"no .png images under {folder}")
    return [os.path.join(folder, n) for n in names]


def cmd_synth(args) -> int:
    samples = synth.generate_dataset(args.seed, args.count, args.size)
    synth.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    raw = read_config(args.config)
    if "train_data" not in raw:
        raise ConfigError(f"{args.config} must set train_data")
    config = train.TrainConfig.from_file(args.config)
    train_ds = synth.read_dataset(raw["train_data"])
    val_ds = synth.read_dataset(raw["val_data"]) if "val_data" in raw else None
    train.fit(train_ds, config, val_samples=val_ds, out_dir=args.out)
    print(f"run artifacts in {args.out}")
    return 0


def _load_unit(path):
    state = ckpt.load_state(path)
    unit_state = {k[len("unit."):]: v for k, v in state.items() if k.startswith("unit.")}
    if not unit_state:
        raise ContractError(f"{path} holds no enhancement-module weights")
    return module_from_state(unit_state), state


def cmd_enhance(args) -> int:
    unit, _ = _load_unit(args.ckpt)
    merged = unit.reparameterize()
    os.makedirs(args.out, exist_ok=True)
    count = 0
    for path in _png_paths(args.input):
        img = imgio.load_image(path)
        h, w = img.shape[1], img.shape[2]
        if h % 4 or w % 4:
            raise ConfigError(f"{path}: size {h}x{w} not divisible by 4")
        enhanced, t, light, _ = merged.enhance(Tensor(img[None]), want_cast=False)
        name = os.path.basename(path)
        imgio.save_image(os.path.join(args.out, name), enhanced.data[0])
        if args.dump_t:
            stem = os.path.splitext(name)[0]
            imgio.save_image(os.path.join(args.out, stem + "_t.png"), t.data[0])
            with open(os.path.join(args.out, stem + "_A.txt"), "w") as fh:
                fh.write(" ".join(f"{v:.6f}" for v in light.data[0]) + "\n")
        count += 1
    print(f"enhanced {count} images into {args.out}")
    return 0


def cmd_augment(args) -> int:
    cfg = UcrtConfig(hue_range=(args.hue_min, args.hue_max), h_jitter=args.h_jitter,
                     sv_jitter=args.sv_jitter, prob=args.prob)
    os.makedirs(args.out, exist_ok=True)
    paths = _png_paths(args.data)
    for idx, path in enumerate(paths):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=args.seed, spawn_key=(idx,)))
        out = ucrt(imgio.load_image(path), cfg, rng)
        imgio.save_image(os.path.join(args.out, os.path.basename(path)), out)
    print(f"augmented {len(paths)} images into {args.out}")
    return 0


def cmd_eval(args) -> int:
    state = ckpt.load_state(args.ckpt)
    detector_model = det.ToyDetector(np.random.default_rng(0))
    detector_model.load_state_dict(
        {k[len("det."):]: v for k, v in state.items() if k.startswith("det.")})
    unit = None
    if args.with_unit:
        unit_state = {k[len("unit."):]: v for k, v in state.items()
                      if k.startswith("unit.")}
        if not unit_state:
            raise ContractError(f"{args.ckpt} holds no enhancement-module weights; "
                                "use --without-unitmodule")
        unit = module_from_state(unit_state)
    samples = synth.read_dataset(args.data)
    t0 = time.time()
    metrics = train.evaluate(unit, detector_model, samples,
                             score_thresh=args.score_thresh)
    elapsed = time.time() - t0
    unit_params = unit.inference_parameter_count() if unit is not None else 0
    print(f"samples:              {len(samples)}")
    for class_id in sorted(metrics["per_class_ap"]):
        name = synth.CLASS_NAMES[class_id]
        print(f"AP@0.5 {name:<12} {metrics['per_class_ap'][class_id]:.4f}")
    print(f"mean AP@0.5:          {metrics['mean_ap']:.4f}")
    print(f"PSNR enhanced (dB):   {metrics['psnr_enhanced']:.3f}")
    print(f"PSNR degraded (dB):   {metrics['psnr_degraded']:.3f}")
    print(f"gray-world deviation: {metrics['gray_world_dev']:.6f}")
    print(f"enhancement params:   {unit_params}")
    print(f"detector params:      {detector_model.parameter_count()}")
    print(f"images/second:        {len(samples) / max(elapsed, 1e-9):.1f}")
    if args.dump_detections:
        det.export_detections_csv(args.dump_detections, metrics["detections"],
                                  [s.sample_id for s in samples])
        print(f"detections csv:       {args.dump_detections}")
    return 0


def cmd_gradcheck(args) -> int:
    results = standard_suite(module=args.module, tol=args.tol)
    failed = 0
    for r in results:
        print(r.row())
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed (tol {args.tol:g})")
    return 0 if failed == 0 else 1


def cmd_hue_stats(args) -> int:
    paths = _png_paths(args.dir)
    stats = hue_stats(imgio.load_image(p) for p in paths)
    print(f"images:        {stats['count']}")
    print(f"hue-mean min:  {stats['hue_mean_min']:.2f}")
    print(f"hue-mean max:  {stats['hue_mean_max']:.2f}")
    print(f"hue-mean avg:  {stats['hue_mean_avg']:.2f}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "augment": cmd_augment,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "hue-stats": cmd_hue_stats,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DatasetError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ContractError, DimensionError, TrainingAbort) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UnitmodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
