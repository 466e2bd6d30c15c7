"""Anchor-free dense detector with a non-local dense classifier.

Small group-normalised backbone, top-down feature pyramid, and a shared head
whose classification branch can carry a non-local relation block right before
the final 1x1 classifier.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import batched_nms, generalized_box_iou_loss

BACKBONE_STRIDES = (4, 8, 16, 32)
BACKBONE_CHANNELS = (16, 32, 64, 64)
VFL_ALPHA = 0.75
VFL_GAMMA = 2.0
PROB_EPS = 1e-6
PIXEL_MEAN = 127.5
PIXEL_STD = 64.0


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int
    fpn_levels: tuple[int, ...] = (8, 16, 32)
    channels: int = 64
    nonlocal_enabled: bool = True
    nonlocal_embed_channels: int | None = None
    head_convs: int = 2
    center_radius: float = 1.5
    prior_prob: float = 0.01

    def __post_init__(self):
        self.fpn_levels = tuple(int(s) for s in self.fpn_levels)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.channels <= 0:
            raise ValueError("channels must be > 0")
        if not self.fpn_levels:
            raise ValueError("fpn_levels must not be empty")
        if list(self.fpn_levels) != sorted(set(self.fpn_levels)):
            raise ValueError("fpn_levels must be strictly ascending")
        for s in self.fpn_levels:
            if s not in BACKBONE_STRIDES:
                raise ValueError(f"stride {s} not available; choose from {BACKBONE_STRIDES}")
        if self.nonlocal_embed_channels is None:
            self.nonlocal_embed_channels = max(1, self.channels // 2)

    @property
    def scale_ranges(self) -> list[tuple[float, float]]:
        """Max-side ranges (lo, hi] per level: (0, 64], (64, 128], ..., (x, inf)."""
        ranges = []
        lo = 0.0
        for i in range(len(self.fpn_levels)):
            hi = math.inf if i == len(self.fpn_levels) - 1 else 64.0 * 2 ** i
            ranges.append((lo, hi))
            lo = hi
        return ranges

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fpn_levels"] = list(self.fpn_levels)
        return d


@dataclass
class DenseOutputs:
    """Per-level dense maps. Tensors are batched (B, ., h, w) unless split per image."""
    class_scores: list[torch.Tensor]
    box_regression: list[torch.Tensor]
    strides: tuple[int, ...]
    features: list[torch.Tensor] = field(default_factory=list)

    def per_image(self) -> list["DenseOutputs"]:
        batch = self.class_scores[0].shape[0]
        return [
            DenseOutputs(
                class_scores=[c[i] for c in self.class_scores],
                box_regression=[r[i] for r in self.box_regression],
                strides=self.strides,
                features=[f[i] for f in self.features],
            )
            for i in range(batch)
        ]


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    label: int
    score: float


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


def _conv_gn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), _gn(cout), nn.ReLU(inplace=True))


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian non-local block in residual form.

    out = x + W_out(softmax(q^T k / sqrt(d)) v), with 1x1 projections. W_out
    starts at zero so the block begins as the identity.
    """

    def __init__(self, channels: int, embed_channels: int | None = None):
        super().__init__()
        embed = embed_channels or max(1, channels // 2)
        self.channels = channels
        self.embed_channels = embed
        self.query = nn.Conv2d(channels, embed, 1)
        self.key = nn.Conv2d(channels, embed, 1)
        self.value = nn.Conv2d(channels, embed, 1)
        self.out = nn.Conv2d(embed, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (B, hw, hw) attention matrix."""
        b = x.shape[0]
        q = self.query(x).reshape(b, self.embed_channels, -1)
        k = self.key(x).reshape(b, self.embed_channels, -1)
        logits = torch.bmm(q.transpose(1, 2), k) / math.sqrt(self.embed_channels)
        return logits.softmax(dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (B, {self.channels}, h, w), got {tuple(x.shape)}")
        b, _, h, w = x.shape
        attn = self.attention(x)
        v = self.value(x).reshape(b, self.embed_channels, -1)
        y = torch.bmm(v, attn.transpose(1, 2)).reshape(b, self.embed_channels, h, w)
        return x + self.out(y)


def non_local_block(features: torch.Tensor, block: NonLocalBlock) -> torch.Tensor:
    """Apply ``block`` to a single C x h x w map or a batch."""
    if features.dim() == 3:
        return block(features.unsqueeze(0)).squeeze(0)
    return block(features)


class Backbone(nn.Module):
    def __init__(self, num_stages: int):
        super().__init__()
        self.stem = _conv_gn_relu(3, BACKBONE_CHANNELS[0], stride=2)
        stages = []
        cin = BACKBONE_CHANNELS[0]
        for cout in BACKBONE_CHANNELS[:num_stages]:
            stages.append(nn.Sequential(_conv_gn_relu(cin, cout, stride=2), _conv_gn_relu(cout, cout)))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


class FPN(nn.Module):
    def __init__(self, in_channels: Sequence[int], channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in in_channels)

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        laterals = [lat(f) for lat, f in zip(self.lateral, feats)]
        for i in range(len(laterals) - 1, 0, -1):
            laterals[i - 1] = laterals[i - 1] + F.interpolate(
                laterals[i], size=laterals[i - 1].shape[-2:], mode="nearest")
        return [conv(x) for conv, x in zip(self.output, laterals)]


class DenseHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels
        self.cls_tower = nn.Sequential(*[_conv_gn_relu(c, c) for _ in range(cfg.head_convs)])
        self.reg_tower = nn.Sequential(*[_conv_gn_relu(c, c) for _ in range(cfg.head_convs)])
        self.relation = NonLocalBlock(c, cfg.nonlocal_embed_channels) if cfg.nonlocal_enabled else None
        self.cls_logits = nn.Conv2d(c, cfg.num_classes, 1)
        self.bbox_pred = nn.Conv2d(c, 4, 3, padding=1)
        self.scales = nn.Parameter(torch.ones(len(cfg.fpn_levels)))
        for m in self.modules():
            if isinstance(m, nn.Conv2d) and m is not getattr(self.relation, "out", None):
                nn.init.normal_(m.weight, std=0.01)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.constant_(self.cls_logits.bias, -math.log((1 - cfg.prior_prob) / cfg.prior_prob))

    def classification_head(self, x: torch.Tensor) -> torch.Tensor:
        x = self.cls_tower(x)
        if self.relation is not None:
            x = self.relation(x)
        return self.cls_logits(x)

    def regression_head(self, x: torch.Tensor, level: int) -> torch.Tensor:
        raw = self.bbox_pred(self.reg_tower(x)) * self.scales[level]
        return torch.exp(raw.clamp(max=8.0))


class DenseDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        num_stages = BACKBONE_STRIDES.index(max(cfg.fpn_levels)) + 1
        self.backbone = Backbone(num_stages)
        self._stage_index = [BACKBONE_STRIDES.index(s) for s in cfg.fpn_levels]
        self.fpn = FPN([BACKBONE_CHANNELS[i] for i in self._stage_index], cfg.channels)
        self.head = DenseHead(cfg)

    @property
    def strides(self) -> tuple[int, ...]:
        return self.cfg.fpn_levels

    def fpn_features(self, images: torch.Tensor) -> list[torch.Tensor]:
        check_input_size(images.shape[-2], images.shape[-1], self.strides)
        stages = self.backbone(images)
        return self.fpn([stages[i] for i in self._stage_index])

    def forward(self, images: torch.Tensor) -> DenseOutputs:
        feats = self.fpn_features(images)
        cls = [self.head.classification_head(f) for f in feats]
        reg = [self.head.regression_head(f, i) for i, f in enumerate(feats)]
        return DenseOutputs(class_scores=cls, box_regression=reg, strides=self.strides, features=feats)


def check_input_size(height: int, width: int, strides: Sequence[int]) -> None:
    s = max(strides)
    if height % s or width % s:
        raise ShapeError(f"input {height}x{width} is not divisible by stride {s}")


def images_to_tensor(images) -> torch.Tensor:
    """uint8 (B, H, W, 3) or (H, W, 3) array(s) to a normalised float (B, 3, H, W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float()
    return (t - PIXEL_MEAN) / PIXEL_STD


def forward(model: DenseDetector, images) -> list[DenseOutputs]:
    """Run the model on a batch of H x W x 3 images; one DenseOutputs per image."""
    x = images if isinstance(images, torch.Tensor) else images_to_tensor(images)
    return model(x).per_image()


def grid_centers(height: int, width: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = height // stride, width // stride
    xs = np.arange(w, dtype=np.float64) * stride + stride / 2.0
    ys = np.arange(h, dtype=np.float64) * stride + stride / 2.0
    return xs, ys


def box_iou_single(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class LevelTargets:
    labels: np.ndarray   # (h, w) int, -1 for negatives
    quality: np.ndarray  # (h, w) float
    boxes: np.ndarray    # (h, w, 4) pixel corners


def assign_targets(boxes, labels, image_size: tuple[int, int], strides: Sequence[int],
                   scale_ranges: Sequence[tuple[float, float]], radius: float = 1.5) -> list[LevelTargets]:
    """Centre-sampling assignment of ground-truth boxes to pyramid cells.

    A cell is positive for a box when its centre lies strictly inside the box
    clipped to a radius*stride window around the box centre, and the box's
    max side falls in the level's range. Overlaps go to the smaller box.
    """
    height, width = image_size
    gt = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gl = np.asarray(labels, dtype=np.int64).reshape(-1)
    areas = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    max_side = np.maximum(gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1])
    out = []
    for stride, (lo, hi) in zip(strides, scale_ranges):
        xs, ys = grid_centers(height, width, stride)
        h, w = len(ys), len(xs)
        t_labels = np.full((h, w), -1, dtype=np.int64)
        t_quality = np.zeros((h, w), dtype=np.float64)
        t_boxes = np.zeros((h, w, 4), dtype=np.float64)
        if len(gt):
            cx = (gt[:, 0] + gt[:, 2]) / 2
            cy = (gt[:, 1] + gt[:, 3]) / 2
            r = radius * stride
            left = np.maximum(cx - r, gt[:, 0])
            right = np.minimum(cx + r, gt[:, 2])
            top = np.maximum(cy - r, gt[:, 1])
            bottom = np.minimum(cy + r, gt[:, 3])
            in_x = (xs[None, :] > left[:, None]) & (xs[None, :] < right[:, None])  # (G, w)
            in_y = (ys[None, :] > top[:, None]) & (ys[None, :] < bottom[:, None])  # (G, h)
            in_scale = (max_side > lo) & (max_side <= hi)
            cand = in_y[:, :, None] & in_x[:, None, :] & in_scale[:, None, None]  # (G, h, w)
            cost = np.where(cand, areas[:, None, None], np.inf)
            best = cost.argmin(axis=0)
            pos = np.isfinite(cost.min(axis=0))
            t_labels[pos] = gl[best[pos]]
            t_boxes[pos] = gt[best[pos]]
            yy, xx = np.nonzero(pos)
            for y, x in zip(yy, xx):
                tb = t_boxes[y, x]
                dist = (xs[x] - tb[0], ys[y] - tb[1], tb[2] - xs[x], tb[3] - ys[y])
                decoded = (xs[x] - dist[0], ys[y] - dist[1], xs[x] + dist[2], ys[y] + dist[3])
                t_quality[y, x] = box_iou_single(decoded, tb)
        out.append(LevelTargets(labels=t_labels, quality=t_quality, boxes=t_boxes))
    return out


@dataclass
class BatchTargets:
    labels: list[torch.Tensor]   # per level (B, h, w)
    quality: list[torch.Tensor]  # per level (B, h, w)
    boxes: list[torch.Tensor]    # per level (B, h, w, 4)


def stack_targets(per_image: Sequence[Sequence[LevelTargets]], dtype=torch.float32) -> BatchTargets:
    levels = range(len(per_image[0]))
    return BatchTargets(
        labels=[torch.from_numpy(np.stack([t[i].labels for t in per_image])) for i in levels],
        quality=[torch.from_numpy(np.stack([t[i].quality for t in per_image])).to(dtype) for i in levels],
        boxes=[torch.from_numpy(np.stack([t[i].boxes for t in per_image])).to(dtype) for i in levels],
    )


def decode_boxes(distances: torch.Tensor, stride: int) -> torch.Tensor:
    """(..., 4, h, w) stride-normalised ltrb distances to (..., h, w, 4) pixel corners."""
    h, w = distances.shape[-2:]
    ys = torch.arange(h, dtype=distances.dtype) * stride + stride / 2
    xs = torch.arange(w, dtype=distances.dtype) * stride + stride / 2
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    d = distances * stride
    l, t, r, b = d.unbind(dim=-3)
    return torch.stack([cx - l, cy - t, cx + r, cy + b], dim=-1)


def varifocal_terms(logits: torch.Tensor, target: torch.Tensor, alpha: float = VFL_ALPHA,
                    gamma: float = VFL_GAMMA, eps: float = PROB_EPS) -> torch.Tensor:
    """Elementwise varifocal loss; ``target`` holds q > 0 on positives and 0 elsewhere."""
    p = torch.sigmoid(logits).clamp(eps, 1 - eps)
    log_p, log_1mp = torch.log(p), torch.log1p(-p)
    positive = target > 0
    pos_loss = -target * (target * log_p + (1 - target) * log_1mp)
    neg_loss = -alpha * p.pow(gamma) * log_1mp
    return torch.where(positive, pos_loss, neg_loss)


def detection_loss(outputs: DenseOutputs, targets: BatchTargets) -> tuple[torch.Tensor, torch.Tensor]:
    """Varifocal classification loss and (1 - GIoU) regression loss.

    Both are normalised by the number of positive cells (at least 1).
    """
    cls_sum = outputs.class_scores[0].new_zeros(())
    pred_boxes, gt_boxes = [], []
    num_pos = 0
    for logits, dist, stride, lab, q, tb in zip(outputs.class_scores, outputs.box_regression,
                                                 outputs.strides, targets.labels, targets.quality,
                                                 targets.boxes):
        pos = lab >= 0
        num_pos += int(pos.sum())
        target = torch.zeros_like(logits)
        if pos.any():
            b, y, x = torch.nonzero(pos, as_tuple=True)
            target[b, lab[pos], y, x] = q[pos].to(logits.dtype)
            pred_boxes.append(decode_boxes(dist, stride)[pos])
            gt_boxes.append(tb[pos].to(dist.dtype))
        cls_sum = cls_sum + varifocal_terms(logits, target).sum()
    norm = max(num_pos, 1)
    if pred_boxes:
        reg = generalized_box_iou_loss(torch.cat(pred_boxes), torch.cat(gt_boxes), reduction="sum") / norm
    else:
        reg = cls_sum.new_zeros(())
    return cls_sum / norm, reg


def giou(box_a, box_b) -> float:
    """Generalised IoU of two corner-form boxes, in (-1, 1]."""
    for box in (box_a, box_b):
        if box[2] <= box[0] or box[3] <= box[1]:
            raise ValueError(f"degenerate box {tuple(box)}")
    iou_val = box_iou_single(box_a, box_b)
    hull = ((max(box_a[2], box_b[2]) - min(box_a[0], box_b[0]))
            * (max(box_a[3], box_b[3]) - min(box_a[1], box_b[1])))
    ix = max(0.0, min(box_a[2], box_b[2]) - max(box_a[0], box_b[0]))
    iy = max(0.0, min(box_a[3], box_b[3]) - max(box_a[1], box_b[1]))
    union = ((box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
             + (box_b[2] - box_b[0]) * (box_b[3] - box_b[1]) - ix * iy)
    return iou_val - (hull - union) / hull


@torch.no_grad()
def decode_detections(outputs: DenseOutputs, image_size: tuple[int, int], score_threshold: float = 0.05,
                      nms_iou: float = 0.6, max_detections: int = 100,
                      pre_nms_top_k: int = 1000) -> list[Detection]:
    """Single-image maps to a score-sorted detection list with per-label NMS."""
    if not (0.0 <= score_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    height, width = image_size
    all_boxes, all_scores, all_labels = [], [], []
    for logits, dist, stride in zip(outputs.class_scores, outputs.box_regression, outputs.strides):
        scores = torch.sigmoid(logits.detach().double())  # (C, h, w)
        boxes = decode_boxes(dist.detach().double(), stride)  # (h, w, 4)
        keep = scores > score_threshold
        if not keep.any():
            continue
        c, y, x = torch.nonzero(keep, as_tuple=True)
        s = scores[c, y, x]
        if len(s) > pre_nms_top_k:
            top = torch.topk(s, pre_nms_top_k).indices
            c, y, x, s = c[top], y[top], x[top], s[top]
        all_boxes.append(boxes[y, x])
        all_scores.append(s)
        all_labels.append(c)
    if not all_boxes:
        return []
    boxes = torch.cat(all_boxes)
    boxes[:, 0::2] = boxes[:, 0::2].clamp(0, width)
    boxes[:, 1::2] = boxes[:, 1::2].clamp(0, height)
    scores, labels = torch.cat(all_scores), torch.cat(all_labels)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores, labels = boxes[valid], scores[valid], labels[valid]
    keep = batched_nms(boxes, scores, labels, nms_iou)[:max_detections]
    return [Detection(box=tuple(float(v) for v in boxes[i].tolist()), label=int(labels[i]),
                      score=float(scores[i])) for i in keep.tolist()]


def save_checkpoint(model: DenseDetector, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"config": model.cfg.to_dict(), "state_dict": model.state_dict(), **(extra or {})}, path)
    return path


def load_checkpoint(path) -> DenseDetector:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = DenseDetector(ModelConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    return model


def write_detections(path, detections_by_image: dict) -> Path:
    """One JSON line per detection: image_id, label, score, x_min, y_min, x_max, y_max."""
    path = Path(path)
    with path.open("w") as fh:
        for image_id, dets in detections_by_image.items():
            for d in sorted(dets, key=lambda d: -d.score):
                fh.write(json.dumps({"image_id": image_id, "label": d.label, "score": d.score,
                                     "x_min": d.box[0], "y_min": d.box[1],
                                     "x_max": d.box[2], "y_max": d.box[3]}) + "\n")
    return path


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                det = Detection(box=(float(rec["x_min"]), float(rec["y_min"]),
                                     float(rec["x_max"]), float(rec["y_max"])),
                                label=int(rec["label"]), score=float(rec["score"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection record ({exc})") from exc
            out.setdefault(str(rec["image_id"]), []).append(det)
    return out
