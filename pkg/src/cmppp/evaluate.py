"""Detection quality: IoU matching, average precision, and the crop-size ablation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import MarkedPointConfig, ValidationError, parallel_map
from .infer import Detection, detect_from_maps
from .network import Checkpoint, forward
from .synth import Dataset

MULTI_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))


def iou(box_a, box_b) -> float:
    """Intersection over union of two center-format (x, y, w, h) boxes.

    Returns 0 whenever the union has zero area.
    """
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    iw = min(ax + aw / 2.0, bx + bw / 2.0) - max(ax - aw / 2.0, bx - bw / 2.0)
    ih = min(ay + ah / 2.0, by + bh / 2.0) - max(ay - ah / 2.0, by - bh / 2.0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class MatchResult:
    """Greedy per-image matching of detections against ground truth."""

    det_is_tp: tuple[bool, ...]
    det_matched_gt: tuple[int, ...]
    gt_matched: tuple[bool, ...]
    iou_threshold: float

    @property
    def tp_count(self) -> int:
        return sum(self.det_is_tp)

    @property
    def fp_count(self) -> int:
        return len(self.det_is_tp) - self.tp_count

    @property
    def fn_count(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


def match(
    detections: list[Detection], gt: MarkedPointConfig, iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy matching in score order: each detection takes the highest-IoU
    unmatched same-class ground truth at or above the threshold, else it is
    a false positive.  Each ground truth matches at most once."""
    order = sorted(range(len(detections)), key=lambda k: -detections[k].score)
    gt_boxes = [(p.x, p.y, p.w, p.h) for p in gt.points]
    gt_classes = [p.class_id for p in gt.points]
    taken = [False] * len(gt_boxes)
    is_tp = [False] * len(detections)
    matched = [-1] * len(detections)
    for k in order:
        det = detections[k]
        best, best_iou = -1, -1.0
        for g, (box, cls) in enumerate(zip(gt_boxes, gt_classes)):
            if taken[g] or cls != det.class_id:
                continue
            v = iou((det.x, det.y, det.w, det.h), box)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            taken[best] = True
            is_tp[k] = True
            matched[k] = best
    return MatchResult(
        det_is_tp=tuple(is_tp),
        det_matched_gt=tuple(matched),
        gt_matched=tuple(taken),
        iou_threshold=iou_threshold,
    )


def average_precision(scored_flags: list[tuple[float, bool]], n_gt: int) -> float:
    """101-point interpolated AP for one class from (score, is_tp) records."""
    if n_gt <= 0:
        raise ValidationError("average precision needs n_gt >= 1")
    if not scored_flags:
        return 0.0
    order = sorted(range(len(scored_flags)), key=lambda k: -scored_flags[k][0])
    tp = np.array([1.0 if scored_flags[k][1] else 0.0 for k in order])
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # precision envelope from the right, then sample at 101 recall levels
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, levels, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class EvalSummary:
    mean_ap: float
    ap_per_class: dict[int, float]
    tp_count: int
    fp_count: int
    fn_count: int
    n_detections: int
    n_gt: int
    iou_thresholds: tuple[float, ...]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean_ap": self.mean_ap,
            "ap_per_class": {str(k): v for k, v in sorted(self.ap_per_class.items())},
            "tp_count": self.tp_count,
            "fp_count": self.fp_count,
            "fn_count": self.fn_count,
            "n_detections": self.n_detections,
            "n_gt": self.n_gt,
            "iou_thresholds": list(self.iou_thresholds),
            **({"meta": self.meta} if self.meta else {}),
        }


def evaluate_detections(
    per_image: list[tuple[list[Detection], MarkedPointConfig]],
    iou_threshold: float = 0.5,
    multi_iou: bool = False,
) -> EvalSummary:
    """Aggregate matches across a dataset into per-class AP and mAP.

    mAP averages over classes with at least one ground truth; with
    ``multi_iou`` the whole computation repeats over thresholds
    0.50:0.05:0.95 and the results are averaged.
    """
    thresholds = MULTI_IOU_THRESHOLDS if multi_iou else (iou_threshold,)
    gt_per_class: dict[int, int] = {}
    for _, gt in per_image:
        for p in gt.points:
            gt_per_class[p.class_id] = gt_per_class.get(p.class_id, 0) + 1

    ap_acc: dict[int, float] = {k: 0.0 for k in gt_per_class}
    tp = fp = 0
    for t_index, thr in enumerate(thresholds):
        records: dict[int, list[tuple[float, bool]]] = {k: [] for k in gt_per_class}
        for dets, gt in per_image:
            result = match(dets, gt, thr)
            if t_index == 0:
                tp += result.tp_count
                fp += result.fp_count
            for det, flag in zip(dets, result.det_is_tp):
                if det.class_id in records:
                    records[det.class_id].append((det.score, flag))
                elif t_index == 0:
                    pass  # detection of a class absent from gt: already counted as FP
        for k in gt_per_class:
            ap_acc[k] += average_precision(records[k], gt_per_class[k])

    ap_per_class = {k: v / len(thresholds) for k, v in ap_acc.items()}
    mean_ap = float(np.mean(list(ap_per_class.values()))) if ap_per_class else 0.0
    n_det = sum(len(dets) for dets, _ in per_image)
    n_gt = sum(gt_per_class.values())
    return EvalSummary(
        mean_ap=mean_ap,
        ap_per_class=ap_per_class,
        tp_count=tp,
        fp_count=fp,
        fn_count=n_gt - tp,
        n_detections=n_det,
        n_gt=n_gt,
        iou_thresholds=thresholds,
    )


def evaluate_dataset(
    checkpoint: Checkpoint,
    dataset: Dataset,
    crop_px: int = 32,
    iou_threshold: float = 0.5,
    multi_iou: bool = False,
    threads: int = 1,
) -> EvalSummary:
    """Detect on every image and score the results."""

    def one(item):
        field_, maps = forward(checkpoint.params, item.input())
        dets, _ = detect_from_maps(field_, maps, crop_px)
        return dets, item.gt()

    per_image = parallel_map(one, dataset.items, threads)
    summary = evaluate_detections(per_image, iou_threshold, multi_iou)
    summary.meta = {"crop_px": crop_px}
    return summary


@dataclass(frozen=True)
class AblationRow:
    crop_px: int
    fp_count: int
    mean_ap: float


def crop_ablation(
    checkpoint: Checkpoint,
    dataset: Dataset,
    crop_sizes: list[int],
    iou_threshold: float = 0.5,
    threads: int = 1,
) -> list[AblationRow]:
    """Re-run detection at each crop size on shared forward passes."""
    if not crop_sizes:
        raise ValidationError("crop_sizes must be non-empty")

    def maps_for(item):
        field_, maps = forward(checkpoint.params, item.input())
        return field_, maps, item.gt()

    cached = parallel_map(maps_for, dataset.items, threads)
    rows = []
    for crop in crop_sizes:
        per_image = []
        for field_, maps, gt in cached:
            dets, _ = detect_from_maps(field_, maps, crop)
            per_image.append((dets, gt))
        summary = evaluate_detections(per_image, iou_threshold)
        rows.append(AblationRow(crop_px=crop, fp_count=summary.fp_count, mean_ap=summary.mean_ap))
    return rows
