"""A minimal grid-based anchor-free detector.

Four stride-2 conv stages (3->16->32->32->32, each with group norm and
ReLU) and a 1x1 head produce one prediction per stride-16 cell with channel
layout [objectness, class 0..2, l, t, r, b].  Box offsets are distances
from the cell center to the box edges in stride units, made positive by a
softplus.  Supervision is center-cell assignment: the cell containing a
box center is positive for that box; when two boxes land in one cell the
larger box wins, so a cell holds at most one target.

The loss is binary cross-entropy on objectness over every cell, plus
cross-entropy on the class and smooth-L1 on the offsets over positive
cells, each term averaged over its own support.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvNorm, Module, ModuleList
from .tensor import Tensor

STRIDE = 16
NUM_CLASSES = 3
# objectness + classes stay logits; the box offsets get a softplus
_LOGIT_MASK = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=np.float32)
_BOX_MASK = 1.0 - _LOGIT_MASK


Box = tuple[int, int, int, int, int]  # (class, x_min, y_min, x_max, y_max)


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


class ToyDetector(Module):
    def __init__(self, rng: np.random.Generator | None = None, gn_groups: int = 8):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = (3, 16, 32, 32, 32)
        self.stages = ModuleList([
            ConvNorm(widths[i], widths[i + 1], 3, rng, stride=2, gn_groups=gn_groups)
            for i in range(4)])
        self.head = Conv2d(32, 1 + NUM_CLASSES + 4, 1, rng, bias=True)

    def __call__(self, image: Tensor) -> Tensor:
        if image.shape[2] % STRIDE or image.shape[3] % STRIDE:
            raise ConfigError(
                f"image size {image.shape[2]}x{image.shape[3]} must be divisible by {STRIDE}")
        h = image
        for stage in self.stages:
            h = stage(h).relu()
        raw = self.head(h)
        logit_mask = Tensor(_LOGIT_MASK.astype(raw.data.dtype))
        box_mask = Tensor(_BOX_MASK.astype(raw.data.dtype))
        return raw * logit_mask + raw.softplus() * box_mask


def assign_targets(boxes_per_image: list[list[Box]], grid_h: int, grid_w: int,
                   stride: int = STRIDE) -> dict[str, np.ndarray]:
    """Dense target maps from box lists; at most one target per cell."""
    n = len(boxes_per_image)
    obj = np.zeros((n, 1, grid_h, grid_w), dtype=np.float32)
    cls = np.zeros((n, NUM_CLASSES, grid_h, grid_w), dtype=np.float32)
    off = np.zeros((n, 4, grid_h, grid_w), dtype=np.float32)
    area = np.zeros((n, grid_h, grid_w), dtype=np.float32)
    for i, boxes in enumerate(boxes_per_image):
        for class_id, x0, y0, x1, y1 in boxes:
            if not 0 <= class_id < NUM_CLASSES:
                raise DimensionError(f"class id {class_id} out of range")
            cx = 0.5 * (x0 + x1)
            cy = 0.5 * (y0 + y1)
            ci = min(int(cy // stride), grid_h - 1)
            cj = min(int(cx // stride), grid_w - 1)
            a = (x1 - x0) * (y1 - y0)
            if obj[i, 0, ci, cj] > 0 and area[i, ci, cj] >= a:
                continue  # an equal or larger box already owns this cell
            area[i, ci, cj] = a
            obj[i, 0, ci, cj] = 1.0
            cls[i, :, ci, cj] = 0.0
            cls[i, class_id, ci, cj] = 1.0
            cell_cx = (cj + 0.5) * stride
            cell_cy = (ci + 0.5) * stride
            off[i, :, ci, cj] = [(cell_cx - x0) / stride, (cell_cy - y0) / stride,
                                 (x1 - cell_cx) / stride, (y1 - cell_cy) / stride]
    return {"obj": obj, "cls": cls, "off": off}


def detector_loss(grid: Tensor, boxes_per_image: list[list[Box]],
                  smooth_l1_beta: float = 1.0) -> Tensor:
    """BCE on objectness everywhere + class CE and offset smooth-L1 on
    positive cells.  Images without boxes contribute objectness only."""
    n, c, gh, gw = grid.shape
    if c != 1 + NUM_CLASSES + 4:
        raise DimensionError(f"grid must have 8 channels, got {c} (axis 1)")
    targets = assign_targets(boxes_per_image, gh, gw)
    obj_logits = T.narrow_channels(grid, 0, 1)
    obj_t = Tensor(targets["obj"].astype(grid.data.dtype))
    # bce(x, y) = softplus(x) - x*y, numerically stable in both directions
    bce = obj_logits.softplus() - obj_logits * obj_t
    loss = bce.sum() * (1.0 / (n * gh * gw))

    n_pos = float(targets["obj"].sum())
    if n_pos > 0:
        pos = Tensor(targets["obj"].astype(grid.data.dtype))
        cls_logits = T.narrow_channels(grid, 1, 1 + NUM_CLASSES)
        onehot = Tensor(targets["cls"].astype(grid.data.dtype))
        ce_map = T.logsumexp_channel(cls_logits) - T.channel_sum(cls_logits * onehot)
        loss = loss + (ce_map * pos).sum() * (1.0 / n_pos)

        box_pred = T.narrow_channels(grid, 1 + NUM_CLASSES, c)
        box_t = Tensor(targets["off"].astype(grid.data.dtype))
        sl1 = (box_pred - box_t).smooth_l1(smooth_l1_beta)
        loss = loss + (T.channel_sum(sl1) * pos).sum() * (1.0 / n_pos)
    return loss


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def decode(grid_data: np.ndarray, score_thresh: float = 0.3,
           stride: int = STRIDE) -> list[Detection]:
    """Decode one image's [8,h,w] grid into scored boxes."""
    obj = 1.0 / (1.0 + np.exp(-grid_data[0]))
    out: list[Detection] = []
    for ci, cj in zip(*np.nonzero(obj > score_thresh)):
        score = float(obj[ci, cj])
        class_id = int(np.argmax(grid_data[1:1 + NUM_CLASSES, ci, cj]))
        l, t, r, b = grid_data[1 + NUM_CLASSES:, ci, cj]
        cx = (cj + 0.5) * stride
        cy = (ci + 0.5) * stride
        box = (float(cx - l * stride), float(cy - t * stride),
               float(cx + r * stride), float(cy + b * stride))
        if box[0] < box[2] and box[1] < box[3]:
            out.append(Detection(box=box, class_id=class_id, score=score))
    return out


def nms(dets: list[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy class-wise suppression; result sorted by descending score."""
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda d: -d.score):
        if all(k.class_id != d.class_id or iou(k.box, d.box) < iou_thresh
               for k in kept):
            kept.append(d)
    return kept


def decode_and_nms(grid_data: np.ndarray, score_thresh: float = 0.3,
                   iou_thresh: float = 0.5, stride: int = STRIDE) -> list[Detection]:
    return nms(decode(grid_data, score_thresh, stride), iou_thresh)


def average_precision(detections: list[list[Detection]],
                      ground_truth: list[list[Box]],
                      iou_thresh: float = 0.5
                      ) -> tuple[dict[int, float], float]:
    """101-point interpolated AP per class and the mean over classes that
    have ground truth.  Detections are matched greedily by descending
    score; each ground-truth box can match once."""
    if len(detections) != len(ground_truth):
        raise DimensionError(
            f"{len(detections)} detection lists vs {len(ground_truth)} truth lists")
    per_class: dict[int, float] = {}
    present = set()
    for gts in ground_truth:
        for box in gts:
            present.add(box[0])
    for class_id in sorted(present):
        scored = []
        total_gt = 0
        gt_boxes: list[list[tuple]] = []
        for img_idx, gts in enumerate(ground_truth):
            boxes = [b[1:] for b in gts if b[0] == class_id]
            gt_boxes.append(boxes)
            total_gt += len(boxes)
        for img_idx, dets in enumerate(detections):
            for d in dets:
                if d.class_id == class_id:
                    scored.append((d.score, img_idx, d.box))
        scored.sort(key=lambda s: -s[0])
        matched = [set() for _ in ground_truth]
        tp = np.zeros(len(scored))
        for rank, (_, img_idx, box) in enumerate(scored):
            best, best_iou = None, iou_thresh
            for gi, gt in enumerate(gt_boxes[img_idx]):
                if gi in matched[img_idx]:
                    continue
                v = iou(box, gt)
                if v >= best_iou:
                    best, best_iou = gi, v
            if best is not None:
                matched[img_idx].add(best)
                tp[rank] = 1.0
        if total_gt == 0:
            continue
        cum_tp = np.cumsum(tp)
        recall = cum_tp / total_gt
        precision = cum_tp / np.arange(1, len(scored) + 1) if len(scored) else np.zeros(0)
        per_class[class_id] = interpolated_ap(recall, precision)
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """COCO-style 101-point interpolation of a PR curve."""
    levels = np.linspace(0.0, 1.0, 101)
    total = 0.0
    for r in levels:
        mask = recall >= r - 1e-12
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / 101.0


def export_detections_csv(path, detections: list[list[Detection]],
                          image_ids: list[str]) -> None:
    with open(path, "w") as fh:
        fh.write("image_id,class,score,x_min,y_min,x_max,y_max\n")
        for image_id, dets in zip(image_ids, detections):
            for d in dets:
                x0, y0, x1, y1 = d.box
                fh.write(f"{image_id},{d.class_id},{d.score:.6f},"
                         f"{x0:.2f},{y0:.2f},{x1:.2f},{y1:.2f}\n")
