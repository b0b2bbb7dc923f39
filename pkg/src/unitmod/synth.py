"""Synthetic detection scenes plus scattering-model degradation with known
ground truth.

Clean scenes are a smooth near-neutral background with 1..5 saturated
shapes (disc / rectangle / ring, one class each) and tight pixel boxes.
Degradation samples, per image, a background light with a green/blue bias,
per-channel attenuation with red fastest (beta_R > beta_G > beta_B, the
underwater ordering), and a smooth random depth field in [0, 3]; the
transmission is ``t_c = exp(-beta_c * depth)`` and the degraded image is
produced by the exact forward scattering model, so the ground truth
(t, light) stays available for evaluation.

Directory layout (all plain files):

    manifest.txt          header plus one line per sample:
                          ``id A_r A_g A_b beta_r beta_g beta_b``
    clean/NNNNN.png       8-bit clean image
    degraded/NNNNN.png    8-bit degraded image
    labels/NNNNN.txt      one ``class x_min y_min x_max y_max`` per line
                          (pixels; max-edge exclusive)
    specs/NNNNN.umt       depth field as a UMT1 tensor [1,1,H,W]
    specs/NNNNN.txt       key=value sidecar with A and beta
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import imgio
from .errors import ConfigError, DatasetError
from .tensor import load_tensor, save_tensor
from .ucrt import hsv_to_rgb
from .util import map_maybe_parallel

CLASS_NAMES = ("disc", "rectangle", "ring")
MIN_BOX_AREA = 16


@dataclass
class DegradationSpec:
    light: np.ndarray        # [3] background light in [0.3, 0.9]
    beta: np.ndarray         # [3] attenuation, beta_R > beta_G > beta_B
    depth: np.ndarray        # [1,1,H,W] in [0,3]

    def transmission(self) -> np.ndarray:
        """Per-channel map [3,H,W]: exp(-beta_c * depth)."""
        return np.exp(-self.beta[:, None, None] * self.depth[0, 0][None]).astype(np.float32)


@dataclass
class SyntheticSample:
    sample_id: str
    clean: np.ndarray        # [3,H,W] float in [0,1]
    degraded: np.ndarray     # [3,H,W] float in [0,1]
    spec: DegradationSpec
    boxes: list[tuple[int, int, int, int, int]]  # (class, x0, y0, x1, y1)


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    """Low-frequency field in [0,1] via bilinear upsampling of coarse noise."""
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells)).astype(np.float32)
    img = Image.fromarray(coarse, mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32)


def _shape_mask(kind: int, size: int, cx: float, cy: float, r: float,
                aspect: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - cx
    dy = yy - cy
    if kind == 0:                       # disc
        return dx * dx + dy * dy <= r * r
    if kind == 1:                       # rectangle
        return (np.abs(dx) <= r) & (np.abs(dy) <= r * aspect)
    rr = dx * dx + dy * dy              # ring
    inner = 0.55 * r
    return (rr <= r * r) & (rr >= inner * inner)


def generate_scene(rng: np.random.Generator, size: int
                   ) -> tuple[np.ndarray, list[tuple[int, int, int, int, int]]]:
    """One clean scene and its tight boxes.  Deterministic per rng state."""
    if not 32 <= size <= 256:
        raise ConfigError(f"scene size must be in [32, 256], got {size}")
    # every channel's background spans nearly all of [0,1]: inverting the
    # degradation is then sharply anchored, because predicting too much
    # attenuation overflows the extremes at once
    img = np.empty((3, size, size), dtype=np.float32)
    for c in range(3):
        lo = rng.uniform(0.01, 0.08)
        hi = rng.uniform(0.90, 0.99)
        field = _smooth_field(rng, size)
        fmin, fmax = float(field.min()), float(field.max())
        img[c] = lo + (hi - lo) * (field - fmin) / max(fmax - fmin, 1e-6)

    n_shapes = int(rng.integers(1, 6))
    boxes: list[tuple[int, int, int, int, int]] = []
    centers: list[tuple[float, float]] = []
    min_sep = 0.28 * size
    for _ in range(n_shapes):
        kind = int(rng.integers(0, 3))
        r = rng.uniform(0.09, 0.16) * size
        aspect = rng.uniform(0.6, 1.0)
        placed = False
        for _ in range(40):
            cx = rng.uniform(r + 1, size - r - 2)
            cy = rng.uniform(r + 1, size - r - 2)
            if all((cx - ox) ** 2 + (cy - oy) ** 2 >= min_sep ** 2
                   for ox, oy in centers):
                placed = True
                break
        if not placed and boxes:
            continue
        centers.append((cx, cy))
        mask = _shape_mask(kind, size, cx, cy, r, aspect)
        if int(mask.sum()) < MIN_BOX_AREA:
            mask = _shape_mask(kind, size, cx, cy, max(r, 3.0), 1.0)
        hue = rng.uniform(0.0, 180.0)
        color = hsv_to_rgb(np.array([[[hue]], [[rng.uniform(170, 255)]],
                                     [[rng.uniform(60, 250)]]], dtype=np.float32))
        img[:, mask] = color[:, 0, 0][:, None]
        ys, xs = np.nonzero(mask)
        boxes.append((kind, int(xs.min()), int(ys.min()),
                      int(xs.max()) + 1, int(ys.max()) + 1))
    return img, boxes


def sample_degradation(rng: np.random.Generator, size: int) -> DegradationSpec:
    light = np.array([rng.uniform(0.3, 0.6),
                      rng.uniform(0.5, 0.9),
                      rng.uniform(0.5, 0.9)], dtype=np.float32)
    beta_r = rng.uniform(0.5, 1.0)
    beta_g = rng.uniform(0.2, 0.5)
    beta_b = rng.uniform(0.1, min(0.3, beta_g))
    beta = np.array([beta_r, beta_g, beta_b], dtype=np.float32)
    # keep a floor on depth so every image is noticeably degraded
    depth_max = rng.uniform(2.4, 3.0)
    field = 0.35 + 0.65 * _smooth_field(rng, size, cells=5)
    depth = (field * depth_max).astype(np.float32)
    return DegradationSpec(light=light, beta=beta, depth=depth[None, None])


def apply_degradation(clean: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, DegradationSpec]:
    """Degrade a clean [3,H,W] image; returns (degraded, spec)."""
    spec = sample_degradation(rng, clean.shape[-1])
    t = spec.transmission()
    degraded = clean * t + (1.0 - t) * spec.light[:, None, None]
    return degraded.astype(np.float32), spec


def generate_sample(seed: int, index: int, size: int) -> SyntheticSample:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    clean, boxes = generate_scene(rng, size)
    degraded, spec = apply_degradation(clean, rng)
    return SyntheticSample(sample_id=f"{index:05d}", clean=clean,
                           degraded=degraded, spec=spec, boxes=boxes)


def generate_dataset(seed: int, count: int, size: int) -> list[SyntheticSample]:
    if count <= 0:
        raise ConfigError(f"sample count must be positive, got {count}")
    return map_maybe_parallel(lambda i: generate_sample(seed, i, size), range(count))


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

def write_dataset(samples: list[SyntheticSample], out_dir) -> None:
    out_dir = os.fspath(out_dir)
    for sub in ("clean", "degraded", "labels", "specs"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    lines = ["# unitmod dataset", f"count = {len(samples)}",
             f"size = {samples[0].clean.shape[-1] if samples else 0}"]
    for s in samples:
        imgio.save_image(os.path.join(out_dir, "clean", s.sample_id + ".png"), s.clean)
        imgio.save_image(os.path.join(out_dir, "degraded", s.sample_id + ".png"), s.degraded)
        with open(os.path.join(out_dir, "labels", s.sample_id + ".txt"), "w") as fh:
            for cls, x0, y0, x1, y1 in s.boxes:
                fh.write(f"{cls} {x0} {y0} {x1} {y1}\n")
        save_tensor(os.path.join(out_dir, "specs", s.sample_id + ".umt"), s.spec.depth)
        with open(os.path.join(out_dir, "specs", s.sample_id + ".txt"), "w") as fh:
            fh.write("A = " + ",".join(f"{v:.9g}" for v in s.spec.light) + "\n")
            fh.write("beta = " + ",".join(f"{v:.9g}" for v in s.spec.beta) + "\n")
        lines.append(s.sample_id + " "
                     + " ".join(f"{v:.9g}" for v in s.spec.light) + " "
                     + " ".join(f"{v:.9g}" for v in s.spec.beta))
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(data_dir) -> list[SyntheticSample]:
    data_dir = os.fspath(data_dir)
    manifest = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise DatasetError(f"manifest not found: {manifest}")
    entries: list[tuple[str, np.ndarray, np.ndarray]] = []
    declared = None
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line:
                key, value = (p.strip() for p in line.split("=", 1))
                if key == "count":
                    declared = int(value)
                continue
            parts = line.split()
            if len(parts) != 7:
                raise DatasetError(f"corrupt manifest line in {manifest}: {line!r}")
            entries.append((parts[0],
                            np.array([float(v) for v in parts[1:4]], dtype=np.float32),
                            np.array([float(v) for v in parts[4:7]], dtype=np.float32)))
    if declared is not None and declared != len(entries):
        raise DatasetError(
            f"manifest {manifest} declares {declared} samples but lists {len(entries)}")

    def load_one(entry):
        sample_id, light, beta = entry
        try:
            clean = imgio.load_image(os.path.join(data_dir, "clean", sample_id + ".png"))
            degraded = imgio.load_image(os.path.join(data_dir, "degraded", sample_id + ".png"))
            depth = load_tensor(os.path.join(data_dir, "specs", sample_id + ".umt")).data
            boxes = []
            with open(os.path.join(data_dir, "labels", sample_id + ".txt")) as fh:
                for row in fh:
                    vals = row.split()
                    if len(vals) != 5:
                        raise DatasetError(f"corrupt label row for sample {sample_id}: {row!r}")
                    boxes.append(tuple(int(v) for v in vals))
        except FileNotFoundError as exc:
            raise DatasetError(f"dataset file missing: {exc.filename}") from exc
        spec = DegradationSpec(light=light, beta=beta, depth=depth)
        return SyntheticSample(sample_id=sample_id, clean=clean, degraded=degraded,
                               spec=spec, boxes=boxes)

    return map_maybe_parallel(load_one, entries)
