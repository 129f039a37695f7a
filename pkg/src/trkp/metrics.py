"""IoU, all-points average precision and dataset-level mAP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _coords(box):
    if hasattr(box, "coords"):
        return box.coords
    return tuple(box)


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = _coords(a)
    bx0, by0, bx1, by1 = _coords(b)
    if ax0 >= ax1 or ay0 >= ay1 or bx0 >= bx1 or by0 >= by1:
        raise ValueError(f"degenerate box in iou: {a} / {b}")
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def greedy_match(detections: Sequence[tuple], ground_truths: Sequence[tuple],
                 iou_threshold: float = 0.5) -> np.ndarray:
    """True-positive flags in descending-score order.

    ``detections`` holds ``(image_id, box, score)``; ``ground_truths`` holds
    ``(image_id, box)``.  Sorting is stable, so score ties keep input order;
    each detection claims the best-overlapping still-unmatched ground truth
    of its image (lower index on equal overlap).
    """
    gt_by_image: dict = {}
    for img, box in ground_truths:
        gt_by_image.setdefault(img, []).append(box)
    used = {img: [False] * len(boxes) for img, boxes in gt_by_image.items()}
    order = sorted(range(len(detections)), key=lambda i: -detections[i][2])
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, box, _ = detections[i]
        best, best_j = iou_threshold, -1
        for j, g in enumerate(gt_by_image.get(img, ())):
            if used[img][j]:
                continue
            o = iou(box, g)
            if o >= best and (best_j < 0 or o > best):
                best, best_j = o, j
        if best_j >= 0:
            used[img][best_j] = True
            tp[rank] = 1
    return tp


def average_precision(detections: Sequence[tuple], ground_truths: Sequence[tuple],
                      iou_threshold: float = 0.5) -> float:
    """All-points interpolated AP for one class (see :func:`greedy_match`)."""
    n_gt = len(ground_truths)
    if n_gt == 0:
        return 0.0
    tp = greedy_match(detections, ground_truths, iou_threshold)
    if not len(tp):
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalResult:
    per_class_ap: dict[int, float]
    mAP: float
    matched: int = 0
    unmatched: int = 0
    gt_counts: dict[int, int] = field(default_factory=dict)


def evaluate_detections(per_image_dets: Sequence[Sequence], per_image_gts: Sequence[Sequence],
                        num_classes: int, iou_threshold: float = 0.5) -> EvalResult:
    """mAP over classes that have at least one ground-truth box.

    Detections need ``box``, ``class_id`` and ``score`` attributes; ground
    truths need ``coords`` and ``class_id``.
    """
    aps: dict[int, float] = {}
    counts: dict[int, int] = {}
    matched = 0
    total_dets = 0
    for c in range(num_classes):
        dets = [(i, d.box, d.score) for i, ds in enumerate(per_image_dets) for d in ds if d.class_id == c]
        gts = [(i, g.coords) for i, gs in enumerate(per_image_gts) for g in gs if g.class_id == c]
        counts[c] = len(gts)
        total_dets += len(dets)
        if not gts:
            continue
        aps[c] = average_precision(dets, gts, iou_threshold)
        matched += int(greedy_match(dets, gts, iou_threshold).sum())
    m = float(np.mean(list(aps.values()))) if aps else 0.0
    return EvalResult(aps, m, matched, total_dets - matched, counts)


def evaluate(model, scenes, num_classes: int, score_threshold: float = 0.05,
             nms_iou: float = 0.5, match_iou: float = 0.5, batch_size: int = 64) -> EvalResult:
    """Decode, suppress and score ``model`` (anything with ``predict``) on ``scenes``."""
    from .detector import decode, nms

    if not scenes:
        raise ValueError("evaluation needs at least one scene")
    dets = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        outs = model.predict(np.stack([s.image for s in chunk]))
        dets.extend(nms(decode(o, score_threshold), nms_iou) for o in outs)
    return evaluate_detections(dets, [s.boxes for s in scenes], num_classes, match_iou)
