"""
Training objectives.

Ground-truth losses for both heads, the three distillation terms that pull
the base-net toward the super-net (classification, box, boundary feature),
the per-location feature variant, and the weighted combination

    total = alpha * L_gt + (1 - alpha) * (w_cls * L_cls + w_iou * L_iou + w_edge * L_edge + L_feat)

Teacher-side tensors are always detached here, so callers may pass them
straight from a forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .assignment import (
    AnchorAssignment,
    MatchResult,
    align_teacher_queries,
    detr_assign,
    index_aligned_queries,
    kd_anchor_sets,
    tal_assign,
)
from .boxes import aligned_ciou_loss, aligned_giou_loss, cxcywh_to_xyxy
from .config import BACKBONE, NECK, HeadKind, _check_keys
from .errors import InvalidSpecError

__all__ = [
    "EdgeVariant",
    "FeatVariant",
    "GtLossWeights",
    "KDHyper",
    "LossBreakdown",
    "detection_gt_loss",
    "kd_cls_loss",
    "kd_reg_loss",
    "kd_feat_loss",
    "kd_feat_spatial_loss",
    "distillation_terms",
    "base_total_loss",
]

FEAT_EPS = 1e-8
GT_COMPONENTS = ("gt_cls", "gt_reg")
KD_COMPONENTS = ("kd_cls", "kd_reg_iou", "kd_reg_edge", "kd_feat")


class EdgeVariant(str, Enum):
    L1 = "l1"
    DFL = "dfl"


class FeatVariant(str, Enum):
    GAP = "gap"
    SPATIAL = "spatial"


@dataclass(frozen=True)
class GtLossWeights:
    """Weights of the ground-truth terms.

    Set-prediction heads use ``classification``, ``l1`` and ``iou`` (GIoU); dense heads
    use ``classification``, ``iou`` (CIoU) and ``dfl``.
    """

    classification: float = 1.0
    l1: float = 5.0
    iou: float = 2.0
    dfl: float = 0.0

    @classmethod
    def for_head(cls, head_kind: HeadKind | str) -> "GtLossWeights":
        if HeadKind(head_kind) is HeadKind.DENSE:
            return cls(classification=0.5, l1=0.0, iou=7.5, dfl=1.5)
        return cls()


def _zero(like: Tensor) -> Tensor:
    """Zero that stays attached to ``like``'s graph."""
    return like.sum() * 0.0


@dataclass(frozen=True)
class KDHyper:
    """Self-distillation hyperparameters.

    ``supervised_stages`` of ``None`` supervises every adaptable stage
    boundary. ``align_targets=False`` gives naive self-distillation: queries
    are paired by index and dense anchors keep their conflicts.
    """

    alpha: float = 0.0
    w_cls_kd: float = 3.75
    temperature: float = 1.0
    w_iou_kd: float = 2.0
    w_edge_kd: float = 5.0
    edge_variant: EdgeVariant = EdgeVariant.L1
    t_dfl: float = 1.0
    feat_weights: Mapping[str, float] = field(default_factory=lambda: {BACKBONE: 0.5, NECK: 0.2})
    supervised_stages: tuple[str, ...] | None = None
    align_targets: bool = True
    feat_variant: FeatVariant = FeatVariant.GAP
    gt_weights: GtLossWeights = field(default_factory=GtLossWeights)

    def __post_init__(self):
        object.__setattr__(self, "edge_variant", EdgeVariant(self.edge_variant))
        object.__setattr__(self, "feat_variant", FeatVariant(self.feat_variant))
        object.__setattr__(self, "feat_weights", dict(self.feat_weights))
        if self.supervised_stages is not None:
            object.__setattr__(self, "supervised_stages", tuple(self.supervised_stages))
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidSpecError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0 or self.t_dfl <= 0:
            raise InvalidSpecError("temperatures must be positive")
        weights = {
            "w_cls_kd": self.w_cls_kd,
            "w_iou_kd": self.w_iou_kd,
            "w_edge_kd": self.w_edge_kd,
            **{f"feat_weights.{k}": v for k, v in self.feat_weights.items()},
        }
        negative = [k for k, v in weights.items() if v < 0]
        if negative:
            raise InvalidSpecError(f"Negative loss weight(s): {', '.join(negative)}")
        unknown = set(self.feat_weights) - {BACKBONE, NECK}
        if unknown:
            raise InvalidSpecError(f"Unknown feature weight group(s): {', '.join(sorted(unknown))}")

    @classmethod
    def for_head(cls, head_kind: HeadKind | str) -> "KDHyper":
        """Published defaults for the head kind."""
        if HeadKind(head_kind) is HeadKind.DENSE:
            return cls(
                alpha=0.2,
                w_cls_kd=0.4,
                temperature=2.0,
                w_iou_kd=1.2,
                w_edge_kd=0.8,
                edge_variant=EdgeVariant.DFL,
                t_dfl=1.0,
                feat_weights={BACKBONE: 0.4, NECK: 0.4},
                gt_weights=GtLossWeights.for_head(HeadKind.DENSE),
            )
        return cls()

    def naive_joint(self) -> "KDHyper":
        """Ground truth only for the base-net: no distillation at all."""
        return replace(
            self,
            alpha=1.0,
            w_cls_kd=0.0,
            w_iou_kd=0.0,
            w_edge_kd=0.0,
            feat_weights={k: 0.0 for k in self.feat_weights},
        )

    @property
    def distills(self) -> bool:
        return self.alpha < 1.0

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "w_cls_kd": self.w_cls_kd,
            "temperature": self.temperature,
            "w_iou_kd": self.w_iou_kd,
            "w_edge_kd": self.w_edge_kd,
            "edge_variant": self.edge_variant.value,
            "t_dfl": self.t_dfl,
            "feat_weights": dict(self.feat_weights),
            "supervised_stages": None if self.supervised_stages is None else list(self.supervised_stages),
            "align_targets": self.align_targets,
            "feat_variant": self.feat_variant.value,
            "gt_weights": {
                "classification": self.gt_weights.classification,
                "l1": self.gt_weights.l1,
                "iou": self.gt_weights.iou,
                "dfl": self.gt_weights.dfl,
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KDHyper":
        _check_keys(data, _HYPER_KEYS, "hyper")
        data = dict(data)
        if "gt_weights" in data:
            _check_keys(data["gt_weights"], ("classification", "l1", "iou", "dfl"), "hyper.gt_weights")
            data["gt_weights"] = GtLossWeights(**data["gt_weights"])
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            if isinstance(e, InvalidSpecError):
                raise
            raise InvalidSpecError(f"Bad hyper description: {e}") from e


_HYPER_KEYS = (
    "alpha", "w_cls_kd", "temperature", "w_iou_kd", "w_edge_kd", "edge_variant", "t_dfl",
    "feat_weights", "supervised_stages", "align_targets", "feat_variant", "gt_weights",
)


@dataclass
class LossBreakdown:
    """A scalar total plus its named components."""

    total: Tensor
    components: dict[str, Tensor] = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        """Detached float values, ``total`` included."""
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.total.detach())
        return out

    def is_finite(self) -> bool:
        values = [self.total, *self.components.values()]
        return all(bool(torch.isfinite(v.detach()).all()) for v in values)

    @property
    def gt_total(self) -> Tensor:
        terms = [self.components[k] for k in GT_COMPONENTS if k in self.components]
        if not terms:
            return _zero(self.total)
        out = terms[0]
        for term in terms[1:]:
            out = out + term
        return out


# ---------------------------------------------------------------------------
# Ground-truth losses
# ---------------------------------------------------------------------------


def _set_prediction_layer_loss(
    cls_logits: Tensor,
    boxes: Tensor,
    targets: Sequence[Mapping[str, Tensor]],
    matches: Sequence[MatchResult],
    weights: GtLossWeights,
    num_gt: float,
) -> tuple[Tensor, Tensor]:
    cls_target = torch.zeros_like(cls_logits)
    pred_boxes, gt_boxes = [], []
    for b, (target, match) in enumerate(zip(targets, matches)):
        if not len(match):
            continue
        queries, gts = match.pairs()
        queries, gts = queries.to(cls_logits.device), gts.to(cls_logits.device)
        cls_target[b, queries, target["labels"][gts]] = 1.0
        pred_boxes.append(boxes[b, queries])
        gt_boxes.append(target["boxes"][gts].to(boxes))
    loss_cls = F.binary_cross_entropy_with_logits(cls_logits, cls_target, reduction="sum") / num_gt
    if not pred_boxes:
        return weights.classification * loss_cls, _zero(boxes)
    pred, gt = torch.cat(pred_boxes), torch.cat(gt_boxes)
    loss_l1 = F.l1_loss(pred, gt, reduction="sum") / num_gt
    loss_giou = aligned_giou_loss(pred, gt).sum() / num_gt
    return weights.classification * loss_cls, weights.l1 * loss_l1 + weights.iou * loss_giou


def _set_prediction_gt_loss(outputs, targets, weights, matches) -> tuple[LossBreakdown, list[MatchResult]]:
    num_gt = max(sum(len(t["labels"]) for t in targets), 1)
    layers = outputs.decoder_aux or [outputs]
    total_cls, total_reg = _zero(outputs.cls_logits), _zero(outputs.boxes)
    final = matches
    for i, layer in enumerate(layers):
        last = i == len(layers) - 1
        layer_matches = matches if last and matches is not None else detr_assign(layer, targets)
        if last:
            final = layer_matches
        cls_loss, reg_loss = _set_prediction_layer_loss(
            layer.cls_logits, layer.boxes, targets, layer_matches, weights, num_gt
        )
        total_cls = total_cls + cls_loss
        total_reg = total_reg + reg_loss
    return LossBreakdown(total_cls + total_reg, {"gt_cls": total_cls, "gt_reg": total_reg}), final


def _distances_to_edges(points: Tensor, scale: Tensor, gt_cxcywh: Tensor, bins: int) -> Tensor:
    """(l, t, r, b) distances in strides, clipped into the bin range."""
    xyxy = cxcywh_to_xyxy(gt_cxcywh)
    lt = (points - xyxy[:, :2]) / scale
    rb = (xyxy[:, 2:] - points) / scale
    return torch.cat([lt, rb], dim=-1).clamp(0.0, bins - 1 - 0.01)


def distribution_focal_loss(edge_logits: Tensor, target: Tensor) -> Tensor:
    """Per-anchor DFL: cross-entropy to the two bins around each target distance.

    Args:
        edge_logits: (N, 4, bins)
        target: (N, 4) distances inside [0, bins - 1)
    """
    left = target.long()
    right = left + 1
    w_left = right.to(target) - target
    w_right = 1 - w_left
    logp = F.log_softmax(edge_logits, dim=-1)
    loss = -(logp.gather(-1, left[..., None]).squeeze(-1) * w_left + logp.gather(-1, right[..., None]).squeeze(-1) * w_right)
    return loss.mean(-1)


def _dense_gt_loss(outputs, targets, weights, assignments) -> tuple[LossBreakdown, list[AnchorAssignment]]:
    if assignments is None:
        assignments = tal_assign(outputs, targets)
    cls_logits = outputs.cls_logits
    bins = outputs.edge_logits.shape[-1]
    cls_target = torch.zeros_like(cls_logits)
    pred_boxes, gt_boxes, edge_logits, edge_targets, box_weights = [], [], [], [], []
    for b, (target, assign) in enumerate(zip(targets, assignments)):
        fg = assign.foreground
        if fg.numel() == 0:
            continue
        gts = assign.target_of[fg]
        score = assign.normalized_score[fg].to(cls_logits)
        cls_target[b, fg, target["labels"][gts]] = score
        gt = target["boxes"][gts].to(outputs.boxes)
        pred_boxes.append(outputs.boxes[b, fg])
        gt_boxes.append(gt)
        edge_logits.append(outputs.edge_logits[b, fg])
        edge_targets.append(_distances_to_edges(outputs.anchor_points[fg], outputs.anchor_scale[fg], gt, bins))
        box_weights.append(score)

    score_sum = cls_target.sum().clamp(min=1.0)
    loss_cls = F.binary_cross_entropy_with_logits(cls_logits, cls_target, reduction="sum") / score_sum
    if not pred_boxes:
        loss_reg = _zero(outputs.boxes) + _zero(outputs.edge_logits)
    else:
        w = torch.cat(box_weights)
        loss_iou = (aligned_ciou_loss(torch.cat(pred_boxes), torch.cat(gt_boxes)) * w).sum() / score_sum
        loss_dfl = (distribution_focal_loss(torch.cat(edge_logits), torch.cat(edge_targets)) * w).sum() / score_sum
        loss_reg = weights.iou * loss_iou + weights.dfl * loss_dfl
    loss_cls = weights.classification * loss_cls
    return LossBreakdown(loss_cls + loss_reg, {"gt_cls": loss_cls, "gt_reg": loss_reg}), assignments


def detection_gt_loss(
    outputs,
    targets: Sequence[Mapping[str, Tensor]],
    head_kind: HeadKind | str,
    weights: GtLossWeights | None = None,
    assignments: Sequence | None = None,
) -> tuple[LossBreakdown, list]:
    """Ground-truth detection loss of one forward pass.

    Set-prediction heads sum BCE, L1 and GIoU over every decoder layer,
    each layer matched on its own. Dense heads use the task-aligned
    assignment with soft BCE targets, CIoU and distribution focal loss.

    Args:
        outputs: ModelOutputs of the pass
        targets: Per image ``labels`` (G,) and ``boxes`` (G, 4) cxcywh
        head_kind: Which head produced ``outputs``
        weights: Term weights; defaults depend on the head
        assignments: Precomputed final-layer matches or anchor assignments

    Returns:
        (breakdown with ``gt_cls`` and ``gt_reg``, final assignments per image)
    """
    head_kind = HeadKind(head_kind)
    weights = weights or GtLossWeights.for_head(head_kind)
    if head_kind is HeadKind.SET_PREDICTION:
        return _set_prediction_gt_loss(outputs, targets, weights, assignments)
    return _dense_gt_loss(outputs, targets, weights, assignments)


# ---------------------------------------------------------------------------
# Distillation terms
# ---------------------------------------------------------------------------


def _select(t: Tensor, index: Tensor | None) -> Tensor:
    return t if index is None else t[index]


def kd_cls_loss(
    teacher_logits: Tensor,
    student_logits: Tensor,
    index: Tensor | None = None,
    temperature: float = 1.0,
) -> Tensor:
    """Mean KL(softmax(teacher / T) || softmax(student / T)) * T^2 over rows.

    Args:
        teacher_logits: (N, C), treated as constants
        student_logits: (N, C)
        index: Optional row subset applied to both
        temperature: Softening temperature T > 0
    """
    teacher = _select(teacher_logits, index).detach()
    student = _select(student_logits, index)
    if student.shape[0] == 0:
        return _zero(student_logits)
    log_p_t = F.log_softmax(teacher / temperature, dim=-1)
    log_p_s = F.log_softmax(student / temperature, dim=-1)
    kl = (log_p_t.exp() * (log_p_t - log_p_s)).sum(-1)
    return kl.mean() * temperature**2


def _edge_kl(teacher_edges: Tensor, student_edges: Tensor, temperature: float) -> Tensor:
    log_p_t = F.log_softmax(teacher_edges / temperature, dim=-1)
    log_p_s = F.log_softmax(student_edges / temperature, dim=-1)
    return (log_p_t.exp() * (log_p_t - log_p_s)).sum(-1).mean() * temperature**2


def kd_reg_loss(
    teacher_boxes: Tensor,
    student_boxes: Tensor,
    index: Tensor | None = None,
    variant: EdgeVariant | str = EdgeVariant.L1,
    teacher_edges: Tensor | None = None,
    student_edges: Tensor | None = None,
    t_dfl: float = 1.0,
) -> tuple[Tensor, Tensor]:
    """Box distillation with the teacher's boxes as soft targets.

    Returns:
        (mean 1 - GIoU, edge term). The edge term is the per-box L1 distance
        in normalised cxcywh for ``l1``, or the KL divergence between the
        teacher's and student's per-edge bin distributions for ``dfl``.
    """
    variant = EdgeVariant(variant)
    teacher = _select(teacher_boxes, index).detach()
    student = _select(student_boxes, index)
    if student.shape[0] == 0:
        zero = _zero(student_boxes)
        if student_edges is not None:
            zero = zero + _zero(student_edges)
        return zero, zero
    iou_term = aligned_giou_loss(student, teacher).mean()
    if variant is EdgeVariant.L1:
        return iou_term, (student - teacher).abs().sum(-1).mean()
    if teacher_edges is None or student_edges is None:
        raise ValueError("dfl edge distillation needs teacher and student edge logits")
    edge_term = _edge_kl(_select(teacher_edges, index).detach(), _select(student_edges, index), t_dfl)
    return iou_term, edge_term


def _stage_weights(boundaries: Mapping[str, Any], hyper: KDHyper, groups: Mapping[str, str]) -> dict[str, float]:
    stages = [s for s in boundaries if hyper.supervised_stages is None or s in hyper.supervised_stages]
    return {s: hyper.feat_weights.get(groups.get(s, BACKBONE), 0.0) for s in stages}


def kd_feat_loss(
    boundaries: Mapping[str, tuple[Tensor, Tensor]],
    hyper: KDHyper,
    groups: Mapping[str, str],
) -> Tensor:
    """Directional alignment of globally pooled boundary descriptors.

    Per stage the essential and full maps are average-pooled to channel
    vectors and l2-normalised; the loss is their squared distance, weighted
    by the stage's group and averaged over supervised stages.

    Args:
        boundaries: stage id -> (x_ess, x_full); x_full is the teacher side
        hyper: Supplies group weights and the supervised stage set
        groups: stage id -> 'backbone' or 'neck'
    """
    weights = _stage_weights(boundaries, hyper, groups)
    if not weights:
        return torch.zeros(())
    total = None
    for stage_id, w in weights.items():
        x_ess, x_full = boundaries[stage_id]
        f_ess = F.normalize(x_ess.mean(dim=(2, 3)), dim=1, eps=FEAT_EPS)
        f_full = F.normalize(x_full.detach().mean(dim=(2, 3)), dim=1, eps=FEAT_EPS)
        loss = (f_ess - f_full).pow(2).sum(1).mean()
        total = w * loss if total is None else total + w * loss
    return total / len(weights)


def kd_feat_spatial_loss(
    boundaries: Mapping[str, tuple[Tensor, Tensor]],
    hyper: KDHyper,
    groups: Mapping[str, str],
) -> Tensor:
    """Per-location variant of :func:`kd_feat_loss`.

    Each spatial position's channel vector is l2-normalised on its own and
    the squared distances are averaged over positions.
    """
    weights = _stage_weights(boundaries, hyper, groups)
    if not weights:
        return torch.zeros(())
    total = None
    for stage_id, w in weights.items():
        x_ess, x_full = boundaries[stage_id]
        u_ess = F.normalize(x_ess, dim=1, eps=FEAT_EPS)
        u_full = F.normalize(x_full.detach(), dim=1, eps=FEAT_EPS)
        loss = (u_ess - u_full).pow(2).sum(1).mean()
        total = w * loss if total is None else total + w * loss
    return total / len(weights)


def _feature_pairs(student, teacher) -> dict[str, tuple[Tensor, Tensor]]:
    pairs = {}
    for stage_id, s_pair in student.boundary_features.items():
        t_pair = teacher.boundary_features.get(stage_id)
        if t_pair is None or s_pair.essential is None or t_pair.full is None:
            continue
        pairs[stage_id] = (s_pair.essential, t_pair.full)
    return pairs


def distillation_terms(
    teacher,
    student,
    head_kind: HeadKind | str,
    hyper: KDHyper,
    groups: Mapping[str, str],
    teacher_assignments: Sequence,
    student_assignments: Sequence,
) -> dict[str, Tensor]:
    """All four distillation terms for one base-net pass.

    Set-prediction heads distil matched queries only: each matched base
    query is paired with the super query answering the same object (or the
    same index when ``hyper.align_targets`` is off). Dense heads distil the
    anchors both networks assign to the same object (all shared foreground
    anchors when alignment is off).
    """
    head_kind = HeadKind(head_kind)
    t_rows, s_rows = [], []
    for b, (t_assign, s_assign) in enumerate(zip(teacher_assignments, student_assignments)):
        if head_kind is HeadKind.SET_PREDICTION:
            if not len(s_assign):
                continue
            if hyper.align_targets:
                mapping = align_teacher_queries(t_assign, s_assign)
            else:
                mapping = index_aligned_queries(s_assign)
            s_idx = torch.tensor(list(mapping), dtype=torch.long)
            t_idx = torch.tensor(list(mapping.values()), dtype=torch.long)
        else:
            sets = kd_anchor_sets(t_assign, s_assign)
            s_idx = t_idx = (sets.valid if hyper.align_targets else sets.shared).cpu()
        s_rows.append((b, s_idx))
        t_rows.append((b, t_idx))

    def gather(tensor: Tensor | None, rows) -> Tensor | None:
        if tensor is None:
            return None
        dev = tensor.device
        parts = [tensor[b, idx.to(dev)] for b, idx in rows]
        return torch.cat(parts) if parts else tensor[:, :0].flatten(0, 1)

    s_logits, t_logits = gather(student.cls_logits, s_rows), gather(teacher.cls_logits, t_rows)
    s_boxes, t_boxes = gather(student.boxes, s_rows), gather(teacher.boxes, t_rows)
    s_edges, t_edges = gather(student.edge_logits, s_rows), gather(teacher.edge_logits, t_rows)

    kd_cls = kd_cls_loss(t_logits, s_logits, temperature=hyper.temperature)
    kd_iou, kd_edge = kd_reg_loss(
        t_boxes, s_boxes, variant=hyper.edge_variant, teacher_edges=t_edges, student_edges=s_edges, t_dfl=hyper.t_dfl
    )
    feat_fn = kd_feat_spatial_loss if hyper.feat_variant is FeatVariant.SPATIAL else kd_feat_loss
    kd_feat = feat_fn(_feature_pairs(student, teacher), hyper, groups).to(s_boxes.device)
    return {"kd_cls": kd_cls, "kd_reg_iou": kd_iou, "kd_reg_edge": kd_edge, "kd_feat": kd_feat}


def base_total_loss(gt: LossBreakdown, kd: Mapping[str, Tensor], hyper: KDHyper) -> LossBreakdown:
    """Combine ground-truth and distillation terms for the base-net pass.

    With ``alpha == 1`` the distillation terms are reported but contribute
    nothing, and the total equals the ground-truth loss exactly.
    """
    l_gt = gt.gt_total
    components = {**gt.components, **{k: kd[k] for k in KD_COMPONENTS if k in kd}}
    if hyper.alpha >= 1.0:
        return LossBreakdown(l_gt, components)
    zero = _zero(l_gt)
    l_kd = (
        hyper.w_cls_kd * kd.get("kd_cls", zero)
        + hyper.w_iou_kd * kd.get("kd_reg_iou", zero)
        + hyper.w_edge_kd * kd.get("kd_reg_edge", zero)
        + kd.get("kd_feat", zero)
    )
    return LossBreakdown(hyper.alpha * l_gt + (1.0 - hyper.alpha) * l_kd, components)
