"""COCO-style detection scoring and the averaged-over-experiences score."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

# Winning challenge scores, for reference only.
CHALLENGE_TRACK2_AVERAGE_MAP = 0.5594
CHALLENGE_TRACK3_AVERAGE_MAP = 0.5465


@dataclass
class EvalConfig:
    iou_thresholds: tuple[float, ...] = COCO_IOU_THRESHOLDS
    label_space: str = "category"
    reference_only: bool = False

    def __post_init__(self):
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        if not self.iou_thresholds:
            raise ValueError("need at least one IoU threshold")
        if any(not 0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.iou_thresholds, self.iou_thresholds[1:])):
            raise ValueError("IoU thresholds must be strictly ascending")
        if self.label_space not in ("category", "instance"):
            raise ValueError("label_space must be 'category' or 'instance'")


@dataclass
class GroundTruth:
    boxes: list[tuple[float, float, float, float]]
    labels: list[int]


@dataclass
class ExperienceScores:
    per_experience_map: list[float]
    average_map: float = field(init=False)

    def __post_init__(self):
        self.average_map = average_map(self.per_experience_map)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), sort_keys=True) + "\n")
        return path


def iou(box_a, box_b) -> float:
    for box in (box_a, box_b):
        if box[2] <= box[0] or box[3] <= box[1]:
            raise ValueError(f"degenerate box {tuple(box)}")
    ix = max(0.0, min(box_a[2], box_b[2]) - max(box_a[0], box_b[0]))
    iy = max(0.0, min(box_a[3], box_b[3]) - max(box_a[1], box_b[1]))
    inter = ix * iy
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    return inter / (area_a + area_b - inter)


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def match_detections(pred_boxes, gt_boxes, iou_threshold: float) -> list[bool]:
    """Greedy matching of score-sorted predictions of one label in one image.

    Returns True (TP) / False (FP) per prediction. Each ground truth is
    matched at most once, to the first prediction that claims it; a
    prediction takes the unmatched ground truth of highest IoU >= threshold.
    """
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    ious = _iou_matrix(pred, gt)
    taken = np.zeros(len(gt), dtype=bool)
    flags = []
    for i in range(len(pred)):
        cand = np.where(taken, -1.0, ious[i]) if len(gt) else np.array([])
        j = int(np.argmax(cand)) if len(cand) else -1
        if j >= 0 and cand[j] >= iou_threshold:
            taken[j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], num_ground_truth: int) -> float:
    """All-points interpolated AP of a score-ranked TP/FP sequence."""
    flags = np.asarray(flags, dtype=bool)
    if num_ground_truth == 0:
        return 1.0 if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_ground_truth
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def _ranked_flags(predictions: Mapping, ground_truth: Mapping, label: int, threshold: float):
    """Pooled (score, image order, rank) sorted TP flags for one label."""
    entries = []
    num_gt = 0
    for order, image_id in enumerate(ground_truth):
        gt = ground_truth[image_id]
        gt_boxes = [b for b, lab in zip(gt.boxes, gt.labels) if lab == label]
        num_gt += len(gt_boxes)
        dets = [d for d in predictions.get(image_id, ()) if d.label == label]
        # Stable sort keeps insertion order among equal scores.
        dets = sorted(dets, key=lambda d: -d.score)
        flags = match_detections([d.box for d in dets], gt_boxes, threshold)
        entries.extend((d.score, order, k, f) for k, (d, f) in enumerate(zip(dets, flags)))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    return [e[3] for e in entries], num_gt


def _restrict(ground_truth: Mapping, cfg: EvalConfig, main_index: Mapping | None) -> dict:
    if not cfg.reference_only:
        return dict(ground_truth)
    if main_index is None:
        raise ValueError("reference_only evaluation needs the main-object index per image")
    out = {}
    for image_id, gt in ground_truth.items():
        k = main_index[image_id]
        out[image_id] = GroundTruth(boxes=[gt.boxes[k]], labels=[gt.labels[k]])
    return out


def per_label_ap(predictions: Mapping, ground_truth: Mapping, cfg: EvalConfig,
                 main_index: Mapping | None = None) -> dict[int, float]:
    """AP averaged over IoU thresholds, for each label present in ground truth."""
    if not ground_truth:
        raise ValueError("empty test set")
    gt = _restrict(ground_truth, cfg, main_index)
    labels = sorted({lab for g in gt.values() for lab in g.labels})
    out = {}
    for label in labels:
        aps = []
        for t in cfg.iou_thresholds:
            flags, num_gt = _ranked_flags(predictions, gt, label, t)
            aps.append(average_precision(flags, num_gt))
        out[label] = float(np.mean(aps))
    return out


def mean_average_precision(predictions: Mapping, ground_truth: Mapping, cfg: EvalConfig | None = None,
                           main_index: Mapping | None = None) -> float:
    """mAP over labels present in ground truth and over IoU thresholds.

    ``predictions`` maps image id to a list of Detection; ``ground_truth``
    maps image id to GroundTruth. Images missing from ``predictions`` have no
    detections.
    """
    cfg = cfg or EvalConfig()
    ap = per_label_ap(predictions, ground_truth, cfg, main_index)
    if not ap:
        return 0.0
    return float(np.mean(list(ap.values())))


def average_map(per_experience_maps: Sequence[float]) -> float:
    """Arithmetic mean, computed exactly and rounded once."""
    values = list(per_experience_maps)
    if not values:
        raise ValueError("need at least one experience score")
    return float(sum(Fraction(v) for v in values) / len(values))


def ground_truth_from_samples(samples, label_space: str = "category"):
    """GroundTruth and main-object index maps keyed by sample key."""
    gts, mains = {}, {}
    for s in samples:
        gts[s.key] = GroundTruth(boxes=[tuple(float(v) for v in b) for b in s.boxes],
                                 labels=s.labels(label_space))
        mains[s.key] = s.main_object_index
    return gts, mains
