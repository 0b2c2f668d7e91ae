"""
Target assignment for both head kinds and the teacher/student pairing used
by self-distillation.

Set-prediction heads are matched one-to-one with a bipartite matcher; dense
heads use a task-aligned assigner over anchor points. When the super-net
and base-net disagree about which object a prediction answers, the
functions at the bottom of this module decide which pairs are distilled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .boxes import pairwise_giou, pairwise_iou
from .errors import InfeasibleMatchError

__all__ = [
    "CostWeights",
    "TalParams",
    "MatchResult",
    "AnchorAssignment",
    "KDAnchorSets",
    "hungarian_match",
    "detr_assign",
    "align_teacher_queries",
    "index_aligned_queries",
    "tal_assign",
    "tal_assign_single",
    "kd_anchor_sets",
]

_TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CostWeights:
    """Weights of the matching cost terms."""

    cls: float = 2.0
    l1: float = 5.0
    iou: float = 2.0


@dataclass(frozen=True)
class TalParams:
    topk: int = 4
    alpha: float = 1.0
    beta: float = 6.0

    def __post_init__(self):
        if self.topk < 1:
            raise ValueError(f"topk must be at least 1, got {self.topk}")


@dataclass
class MatchResult:
    """One-to-one assignment of queries to ground-truth objects.

    Attributes:
        sigma: Query index -> ground-truth index
        cost: Total cost of the assignment
    """

    sigma: dict[int, int] = field(default_factory=dict)
    cost: float = 0.0

    def __len__(self) -> int:
        return len(self.sigma)

    @property
    def inverse(self) -> dict[int, int]:
        """Ground-truth index -> query index."""
        return {g: q for q, g in self.sigma.items()}

    def pairs(self) -> tuple[Tensor, Tensor]:
        """(query indices, gt indices) as long tensors, ordered by query."""
        items = sorted(self.sigma.items())
        queries = torch.tensor([q for q, _ in items], dtype=torch.long)
        gts = torch.tensor([g for _, g in items], dtype=torch.long)
        return queries, gts


def _lsap_cost(cost: np.ndarray) -> float:
    if cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian_match(cost_matrix) -> MatchResult:
    """Minimum-cost injective assignment of all G targets to Q predictions.

    Among several optimal assignments the one whose query sequence
    (query of gt 0, query of gt 1, ...) is lexicographically smallest wins.

    Args:
        cost_matrix: (Q, G) array-like of finite costs

    Returns:
        MatchResult covering every target

    Raises:
        InfeasibleMatchError: If Q < G
        ValueError: If the matrix is not 2-D or holds non-finite entries

    Example:
        >>> hungarian_match([[0, 1], [1, 0]]).sigma
        {0: 0, 1: 1}
    """
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n_queries, n_targets = cost.shape
    if n_queries < n_targets:
        raise InfeasibleMatchError(f"Cannot match {n_targets} targets to {n_queries} predictions")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix holds non-finite entries")
    if n_targets == 0:
        return MatchResult()

    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    current = {int(g): int(q) for q, g in zip(rows, cols)}
    tol = _TIE_TOLERANCE * max(1.0, abs(best))

    # fix targets in order to the smallest query that keeps the optimum
    fixed: dict[int, int] = {}
    fixed_cost = 0.0
    for g in range(n_targets):
        used = set(fixed.values())
        rest_cols = [c for c in range(n_targets) if c > g]
        for q in range(current[g]):
            if q in used:
                continue
            free_rows = [r for r in range(n_queries) if r not in used and r != q]
            sub = cost[np.ix_(free_rows, rest_cols)]
            if fixed_cost + cost[q, g] + _lsap_cost(sub) <= best + tol:
                current = {**fixed, g: q}
                if rest_cols:
                    sub_rows, sub_cols = linear_sum_assignment(sub)
                    current.update({rest_cols[c]: free_rows[r] for r, c in zip(sub_rows, sub_cols)})
                break
        fixed[g] = current[g]
        fixed_cost += cost[current[g], g]

    sigma = {q: g for g, q in sorted(fixed.items(), key=lambda item: item[1])}
    return MatchResult(sigma, float(sum(cost[q, g] for q, g in sigma.items())))


def _matching_cost(cls_logits: Tensor, boxes: Tensor, labels: Tensor, gt_boxes: Tensor, weights: CostWeights) -> Tensor:
    prob = cls_logits.sigmoid()[:, labels]
    l1 = torch.cdist(boxes, gt_boxes, p=1)
    giou = pairwise_giou(boxes, gt_boxes)
    return weights.cls * (-prob) + weights.l1 * l1 + weights.iou * (1 - giou)


@torch.no_grad()
def detr_assign(outputs, targets: Sequence[Mapping[str, Tensor]], cost_weights: CostWeights | None = None) -> list[MatchResult]:
    """Hungarian assignment per image.

    Args:
        outputs: Anything carrying ``cls_logits`` (B, Q, C) and ``boxes``
            (B, Q, 4): a ModelOutputs or one decoder layer's prediction
        targets: Per image, ``labels`` (G,) and ``boxes`` (G, 4) cxcywh
        cost_weights: Weights of the class, L1 and GIoU terms

    Returns:
        One MatchResult per image; images without targets get an empty one
    """
    weights = cost_weights or CostWeights()
    results = []
    for logits, boxes, target in zip(outputs.cls_logits, outputs.boxes, targets):
        labels, gt_boxes = target["labels"], target["boxes"]
        if len(labels) == 0:
            results.append(MatchResult())
            continue
        cost = _matching_cost(logits.float(), boxes.float(), labels, gt_boxes.to(boxes).float(), weights)
        results.append(hungarian_match(cost.cpu().numpy()))
    return results


def align_teacher_queries(match_super: MatchResult, match_base: MatchResult) -> dict[int, int]:
    """Map each matched base-net query to the super-net query of the same object.

    Raises:
        ValueError: If the two matches do not cover the same targets
    """
    super_of = match_super.inverse
    base_of = match_base.inverse
    if set(super_of) != set(base_of):
        raise ValueError(
            f"Matches cover different targets: super {sorted(super_of)}, base {sorted(base_of)}"
        )
    return {base_of[g]: super_of[g] for g in sorted(base_of)}


def index_aligned_queries(match_base: MatchResult) -> dict[int, int]:
    """Position-wise pairing of matched base queries with the same super index."""
    return {q: q for q in sorted(match_base.sigma)}


@dataclass
class AnchorAssignment:
    """Task-aligned assignment of one image's anchors.

    Attributes:
        target_of: (A,) ground-truth index per anchor, -1 for background
        alignment_score: (A,) alignment metric of the assigned pair, 0 for background
        normalized_score: (A,) soft classification target; per object the
            metric is rescaled so its best anchor reaches that object's best IoU
    """

    target_of: Tensor
    alignment_score: Tensor
    normalized_score: Tensor

    @property
    def foreground(self) -> Tensor:
        return (self.target_of >= 0).nonzero(as_tuple=True)[0]

    @property
    def num_anchors(self) -> int:
        return self.target_of.numel()

    @classmethod
    def empty(cls, num_anchors: int, device=None) -> "AnchorAssignment":
        zeros = torch.zeros(num_anchors, device=device)
        return cls(torch.full((num_anchors,), -1, dtype=torch.long, device=device), zeros, zeros.clone())


def _points_inside(points: Tensor, gt_xyxy: Tensor, eps: float = 1e-9) -> Tensor:
    """(G, A) mask of anchor points strictly inside each box."""
    x, y = points[:, 0][None], points[:, 1][None]
    x1, y1, x2, y2 = (gt_xyxy[:, i, None] for i in range(4))
    return (x - x1 > eps) & (x2 - x > eps) & (y - y1 > eps) & (y2 - y > eps)


@torch.no_grad()
def tal_assign_single(
    scores: Tensor,
    boxes: Tensor,
    anchor_points: Tensor,
    labels: Tensor,
    gt_boxes: Tensor,
    params: TalParams | None = None,
) -> AnchorAssignment:
    """Task-aligned assignment for one image.

    Args:
        scores: (A, C) class probabilities
        boxes: (A, 4) predicted cxcywh boxes
        anchor_points: (A, 2) normalised anchor centres
        labels: (G,) class indices
        gt_boxes: (G, 4) cxcywh targets
        params: top-k and exponents of the alignment metric
    """
    params = params or TalParams()
    n_anchors = anchor_points.shape[0]
    if len(labels) == 0:
        return AnchorAssignment.empty(n_anchors, anchor_points.device)

    gt_boxes = gt_boxes.to(boxes)
    iou = pairwise_iou(gt_boxes, boxes).clamp(min=0)
    cls = scores[:, labels].T
    metric = cls.pow(params.alpha) * iou.pow(params.beta)
    half = gt_boxes[:, 2:] / 2
    inside = _points_inside(anchor_points, torch.cat([gt_boxes[:, :2] - half, gt_boxes[:, :2] + half], dim=1))

    # top-k candidates per object among inside anchors; ties keep the lower index
    masked = torch.where(inside, metric, torch.full_like(metric, -1.0))
    order = torch.sort(masked, dim=1, descending=True, stable=True).indices[:, : params.topk]
    candidate = torch.zeros_like(inside)
    candidate.scatter_(1, order, True)
    positive = candidate & inside

    # an anchor claimed by several objects keeps the highest-scoring one
    claim = torch.where(positive, metric, torch.full_like(metric, -1.0))
    best_metric, best_gt = claim.max(dim=0)
    is_fg = positive.any(dim=0)
    target_of = torch.where(is_fg, best_gt, torch.full_like(best_gt, -1))
    alignment = torch.where(is_fg, best_metric, torch.zeros_like(best_metric))

    normalized = torch.zeros_like(alignment)
    if is_fg.any():
        fg = is_fg.nonzero(as_tuple=True)[0]
        gts = target_of[fg]
        n_gt = len(labels)
        max_metric = torch.zeros(n_gt, dtype=metric.dtype, device=metric.device)
        max_iou = torch.zeros_like(max_metric)
        max_metric.scatter_reduce_(0, gts, alignment[fg], reduce="amax")
        max_iou.scatter_reduce_(0, gts, iou[gts, fg], reduce="amax")
        normalized[fg] = alignment[fg] * max_iou[gts] / (max_metric[gts] + 1e-9)
    return AnchorAssignment(target_of, alignment, normalized)


def tal_assign(outputs, targets: Sequence[Mapping[str, Tensor]], params: TalParams | None = None) -> list[AnchorAssignment]:
    """Task-aligned assignment per image of a dense-head output batch.

    Anchors come from ``outputs.anchor_points``; scores are the sigmoid of
    ``outputs.cls_logits``.
    """
    if outputs.anchor_points is None:
        raise ValueError("tal_assign needs dense-head outputs with anchor points")
    scores = outputs.cls_logits.detach().sigmoid()
    boxes = outputs.boxes.detach()
    return [
        tal_assign_single(s, b, outputs.anchor_points, t["labels"], t["boxes"], params)
        for s, b, t in zip(scores, boxes, targets)
    ]


@dataclass
class KDAnchorSets:
    """Anchors foreground in both networks, split by whether their targets agree."""

    conflict: Tensor
    valid: Tensor

    @property
    def shared(self) -> Tensor:
        """Valid and conflicting anchors together, sorted."""
        return torch.cat([self.conflict, self.valid]).sort().values


def kd_anchor_sets(assign_super: AnchorAssignment, assign_base: AnchorAssignment) -> KDAnchorSets:
    """Conflict and valid distillation sets of two assignments of the same anchors.

    Raises:
        ValueError: If the assignments cover different anchor counts
    """
    if assign_super.num_anchors != assign_base.num_anchors:
        raise ValueError(
            f"Anchor spaces differ: {assign_super.num_anchors} vs {assign_base.num_anchors}"
        )
    g_super = assign_super.target_of
    g_base = assign_base.target_of.to(g_super.device)
    both = (g_super >= 0) & (g_base >= 0)
    disagree = both & (g_super != g_base)
    return KDAnchorSets(
        conflict=disagree.nonzero(as_tuple=True)[0],
        valid=(both & ~disagree).nonzero(as_tuple=True)[0],
    )
