"""Teacher snapshots and feature distillation losses.

``nonlocal`` compares teacher and student FPN features after passing both
through the same trainable non-local relation block. ``feature``,
``attention`` and ``logit`` are the comparison variants.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .detector import DenseDetector, NonLocalBlock, PROB_EPS

VARIANTS = ("none", "nonlocal", "feature", "attention", "logit")


@dataclass
class DistillConfig:
    variant: str = "nonlocal"
    weight: float = 1.0
    levels: tuple[int, ...] | None = None  # indices into the FPN levels; None = all

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.weight < 0:
            raise ValueError("distillation weight must be >= 0")
        if self.levels is not None:
            self.levels = tuple(int(i) for i in self.levels)

    def selected(self, num_levels: int) -> list[int]:
        if self.levels is None:
            return list(range(num_levels))
        bad = [i for i in self.levels if not 0 <= i < num_levels]
        if bad:
            raise ValueError(f"distillation levels {bad} out of range for {num_levels} FPN levels")
        return list(self.levels)


@dataclass
class TeacherSnapshot:
    model: DenseDetector
    source_task_index: int

    @torch.no_grad()
    def __call__(self, images: torch.Tensor):
        return self.model(images)


def snapshot_teacher(student: DenseDetector, task_index: int) -> TeacherSnapshot:
    teacher = copy.deepcopy(student)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return TeacherSnapshot(model=teacher, source_task_index=task_index)


class RelationModule(nn.Module):
    """One non-local block per FPN level, shared by teacher and student paths."""

    def __init__(self, channels: int, num_levels: int, embed_channels: int | None = None):
        super().__init__()
        self.blocks = nn.ModuleList(NonLocalBlock(channels, embed_channels) for _ in range(num_levels))

    def forward(self, level: int, x: torch.Tensor) -> torch.Tensor:
        return self.blocks[level](x)


def _check_shapes(teacher: Sequence[torch.Tensor], student: Sequence[torch.Tensor]) -> None:
    if len(teacher) != len(student):
        raise ValueError(f"{len(teacher)} teacher levels vs {len(student)} student levels")
    for i, (t, s) in enumerate(zip(teacher, student)):
        if t.shape != s.shape:
            raise ValueError(f"level {i}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")


def nonlocal_distill_loss(teacher_feats, student_feats, relation: RelationModule,
                          cfg: DistillConfig | None = None) -> torch.Tensor:
    """Mean over levels of MSE between relation(teacher) and relation(student).

    Teacher features are detached; gradients reach the student features and
    the relation parameters through both branches.
    """
    cfg = cfg or DistillConfig("nonlocal")
    _check_shapes(teacher_feats, student_feats)
    levels = cfg.selected(len(student_feats))
    losses = [((relation(i, teacher_feats[i].detach()) - relation(i, student_feats[i])) ** 2).mean()
              for i in levels]
    return torch.stack(losses).mean()


def feature_distill_loss(teacher_feats, student_feats, cfg: DistillConfig | None = None) -> torch.Tensor:
    cfg = cfg or DistillConfig("feature")
    _check_shapes(teacher_feats, student_feats)
    levels = cfg.selected(len(student_feats))
    return torch.stack([((teacher_feats[i].detach() - student_feats[i]) ** 2).mean() for i in levels]).mean()


def spatial_attention(feats: torch.Tensor) -> torch.Tensor:
    """Softmax over positions of the channel-mean absolute activation: (B, C, h, w) -> (B, h*w)."""
    return feats.abs().mean(dim=1).flatten(1).softmax(dim=1)


def attention_distill_loss(teacher_feats, student_feats, cfg: DistillConfig | None = None) -> torch.Tensor:
    cfg = cfg or DistillConfig("attention")
    _check_shapes(teacher_feats, student_feats)
    levels = cfg.selected(len(student_feats))
    return torch.stack([
        ((spatial_attention(teacher_feats[i].detach()) - spatial_attention(student_feats[i])) ** 2).mean()
        for i in levels
    ]).mean()


def logit_distill_loss(teacher_cls, student_cls, cfg: DistillConfig | None = None,
                       eps: float = PROB_EPS) -> torch.Tensor:
    """Binary KL from teacher to student per-pixel class probabilities.

    Only the teacher's classes are compared: the student maps may carry
    extra trailing channels. Probabilities are clamped to [eps, 1 - eps], so
    the loss is exactly zero when the maps agree.
    """
    cfg = cfg or DistillConfig("logit")
    if len(teacher_cls) != len(student_cls):
        raise ValueError("teacher and student level counts differ")
    levels = cfg.selected(len(student_cls))
    losses = []
    for i in levels:
        t, s = teacher_cls[i].detach(), student_cls[i]
        if t.shape[1] > s.shape[1] or t.shape[0] != s.shape[0] or t.shape[2:] != s.shape[2:]:
            raise ValueError(f"level {i}: teacher {tuple(t.shape)} is not an old-class prefix of "
                             f"student {tuple(s.shape)}")
        s = s[:, : t.shape[1]]
        pt = torch.sigmoid(t).clamp(eps, 1 - eps)
        ps = torch.sigmoid(s).clamp(eps, 1 - eps)
        kl = pt * (torch.log(pt) - torch.log(ps)) + (1 - pt) * (torch.log1p(-pt) - torch.log1p(-ps))
        losses.append(kl.mean())
    return torch.stack(losses).mean()


def total_loss(supervised: tuple, distill, cfg: DistillConfig | None = None):
    """cls + reg + weight * distill; the distillation term is dropped for variant 'none'."""
    cls, reg = supervised
    if cfg is None or cfg.variant == "none" or distill is None:
        return cls + reg
    return cls + reg + cfg.weight * distill


def distill_loss(cfg: DistillConfig, teacher_out, student_out, relation: RelationModule | None = None,
                 old_classes: Sequence[int] | None = None):
    """Dispatch on ``cfg.variant`` given teacher and student DenseOutputs."""
    if cfg.variant == "none":
        return None
    if cfg.variant == "nonlocal":
        if relation is None:
            raise ValueError("nonlocal distillation needs a RelationModule")
        return nonlocal_distill_loss(teacher_out.features, student_out.features, relation, cfg)
    if cfg.variant == "feature":
        return feature_distill_loss(teacher_out.features, student_out.features, cfg)
    if cfg.variant == "attention":
        return attention_distill_loss(teacher_out.features, student_out.features, cfg)
    if old_classes is None:
        teacher_cls, student_cls = teacher_out.class_scores, student_out.class_scores
    else:
        idx = torch.as_tensor(list(old_classes), dtype=torch.long)
        if len(idx) == 0:
            return None
        teacher_cls = [c.index_select(1, idx) for c in teacher_out.class_scores]
        student_cls = [c.index_select(1, idx) for c in student_out.class_scores]
    return logit_distill_loss(teacher_cls, student_cls, cfg)
