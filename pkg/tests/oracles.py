"""Slow reference implementations used only by the tests.

Written against the textbook definitions with plain loops, sharing no code
with the package.
"""
from __future__ import annotations

import math
from fractions import Fraction


def iou_by_pixel_count(a, b, resolution: int = 1) -> Fraction:
    """IoU of integer boxes by counting sub-pixel cells."""
    inter = union = 0
    xs = [Fraction(min(a[0], b[0])) + Fraction(i, resolution)
          for i in range(int((max(a[2], b[2]) - min(a[0], b[0])) * resolution))]
    ys = [Fraction(min(a[1], b[1])) + Fraction(j, resolution)
          for j in range(int((max(a[3], b[3]) - min(a[1], b[1])) * resolution))]
    half = Fraction(1, 2 * resolution)
    for x in xs:
        for y in ys:
            cx, cy = x + half, y + half
            in_a = a[0] <= cx < a[2] and a[1] <= cy < a[3]
            in_b = b[0] <= cx < b[2] and b[1] <= cy < b[3]
            inter += in_a and in_b
            union += in_a or in_b
    return Fraction(inter, union)


def ref_iou(a, b) -> float:
    w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = w * h
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def ref_match(preds, gts, thr):
    """Greedy one-to-one matching by explicit enumeration of candidates."""
    used = set()
    flags = []
    for p in preds:
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if j in used:
                continue
            v = ref_iou(p, g)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= thr:
            used.add(best)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def ref_ap(flags, num_gt) -> float:
    """AP as the sum over recall steps of the best precision at or beyond that recall."""
    if num_gt == 0:
        return 1.0 if not flags else 0.0
    points = []
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += f
        points.append((tp / num_gt, tp / k))
    total = 0.0
    prev_recall = 0.0
    for recall, _ in points:
        if recall > prev_recall:
            best = max(p for r, p in points if r >= recall)
            total += (recall - prev_recall) * best
            prev_recall = recall
    return total


def ref_map(preds_by_image, gt_by_image, thresholds, main_index=None):
    """End-to-end mAP; inputs are plain dicts/tuples.

    preds_by_image: image -> list of (box, label, score)
    gt_by_image: image -> list of (box, label)
    """
    if main_index is not None:
        gt_by_image = {k: [v[main_index[k]]] for k, v in gt_by_image.items()}
    images = list(gt_by_image)
    labels = sorted({lab for gts in gt_by_image.values() for _, lab in gts})
    per_label = []
    for label in labels:
        aps = []
        for thr in thresholds:
            ranked = []
            num_gt = 0
            for order, img in enumerate(images):
                gts = [b for b, lab in gt_by_image[img] if lab == label]
                num_gt += len(gts)
                ps = [(b, s) for b, lab, s in preds_by_image.get(img, []) if lab == label]
                ps = sorted(enumerate(ps), key=lambda t: (-t[1][1], t[0]))
                flags = ref_match([b for _, (b, _) in ps], gts, thr)
                ranked += [(-s, order, k, f) for k, ((_, (_, s)), f) in enumerate(zip(ps, flags))]
            ranked.sort()
            aps.append(ref_ap([r[3] for r in ranked], num_gt))
        per_label.append(sum(aps) / len(aps))
    return sum(per_label) / len(per_label) if per_label else 0.0


def brute_force_assign(boxes, image_size, stride, radius, lo, hi):
    """Per-cell index of the assigned box (or -1), one cell at a time."""
    height, width = image_size
    out = []
    for j in range(height // stride):
        row = []
        for i in range(width // stride):
            x = i * stride + stride / 2
            y = j * stride + stride / 2
            best, best_area = -1, math.inf
            for k, (x0, y0, x1, y1) in enumerate(boxes):
                side = max(x1 - x0, y1 - y0)
                if not (lo < side <= hi):
                    continue
                cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
                left, right = max(cx - radius * stride, x0), min(cx + radius * stride, x1)
                top, bottom = max(cy - radius * stride, y0), min(cy + radius * stride, y1)
                if left < x < right and top < y < bottom:
                    area = (x1 - x0) * (y1 - y0)
                    if area < best_area:
                        best, best_area = k, area
            row.append(best)
        out.append(row)
    return out
