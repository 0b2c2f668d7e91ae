"""Box-format conversions and IoU variants shared by assignment, losses and evaluation."""

from __future__ import annotations

import numpy as np
from torch import Tensor
from torchvision.ops import (
    box_convert,
    box_iou,
    complete_box_iou_loss,
    generalized_box_iou,
    generalized_box_iou_loss,
)


def cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    return box_convert(boxes, "cxcywh", "xyxy")


def xyxy_to_cxcywh(boxes: Tensor) -> Tensor:
    return box_convert(boxes, "xyxy", "cxcywh")


def pairwise_iou(a: Tensor, b: Tensor) -> Tensor:
    """IoU matrix between two sets of cxcywh boxes."""
    return box_iou(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))


def pairwise_giou(a: Tensor, b: Tensor) -> Tensor:
    """GIoU matrix between two sets of cxcywh boxes."""
    return generalized_box_iou(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))


def aligned_giou_loss(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise 1 - GIoU for aligned (N, 4) cxcywh boxes; lies in [0, 2]."""
    return generalized_box_iou_loss(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b), reduction="none")


def aligned_ciou_loss(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise 1 - CIoU for aligned (N, 4) cxcywh boxes."""
    return complete_box_iou_loss(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b), reduction="none")


def iou_matrix_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (N, 4) and (M, 4) xyxy arrays."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def cxcywh_to_xyxy_np(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)
