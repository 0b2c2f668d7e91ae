"""
Synthetic multi-scale shapes dataset and a COCO-style box evaluator.

Scenes hold circles, squares and triangles of three size tiers on a
textured background, rendered supersampled with Pillow and downsampled for
anti-aliasing. Every scene draws from its own generator seeded by
``(seed, index)``, so any prefix of a dataset is reproducible on its own.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

from .boxes import cxcywh_to_xyxy_np, iou_matrix_np

logger = logging.getLogger(__name__)

CLASS_NAMES = ("circle", "square", "triangle")
ANNOTATION_FILE = "annotations.json"
IMAGE_DIR = "images"


class SizeTier(str, Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


# object side as a fraction of the image side
TIER_SIDES: dict[SizeTier, tuple[float, float]] = {
    SizeTier.SMALL: (0.08, 0.15),
    SizeTier.MEDIUM: (0.15, 0.35),
    SizeTier.LARGE: (0.35, 0.6),
}
TIER_MIX = (0.4, 0.4, 0.2)


def size_tier_of(area_fraction: float) -> SizeTier:
    """Tier of a box from its area as a fraction of the image area."""
    if area_fraction < TIER_SIDES[SizeTier.SMALL][1] ** 2:
        return SizeTier.SMALL
    if area_fraction < TIER_SIDES[SizeTier.MEDIUM][1] ** 2:
        return SizeTier.MEDIUM
    return SizeTier.LARGE


@dataclass(frozen=True)
class DatasetSpec:
    """Image size, class proportions and clutter level of a synthetic set.

    ``clutter`` in [0, 1] sets the object count (1 to 1 + round(7 c)), the
    background texture amplitude, and allows overlapping shapes above 0.5.
    """

    hw: tuple[int, int] = (128, 128)
    class_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    clutter: float = 0.5
    supersample: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hw", tuple(self.hw))
        object.__setattr__(self, "class_mix", tuple(self.class_mix))
        if len(self.class_mix) != len(CLASS_NAMES) or min(self.class_mix) < 0 or sum(self.class_mix) <= 0:
            raise ValueError(f"class_mix needs {len(CLASS_NAMES)} non-negative weights, got {self.class_mix}")
        if not 0.0 <= self.clutter <= 1.0:
            raise ValueError(f"clutter must lie in [0, 1], got {self.clutter}")
        if min(self.hw) < 16:
            raise ValueError(f"image size {self.hw} too small")

    @property
    def max_objects(self) -> int:
        return 1 + round(7 * self.clutter)


@dataclass(frozen=True)
class SceneObject:
    label: int
    box: tuple[float, float, float, float]  # normalised cxcywh
    tier: SizeTier

    @property
    def name(self) -> str:
        return CLASS_NAMES[self.label]


@dataclass
class Scene:
    """One rendered image (H, W, 3) in [0, 1] and its objects."""

    image: np.ndarray
    objects: list[SceneObject] = field(default_factory=list)

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.label for o in self.objects], dtype=np.int64)

    @property
    def boxes(self) -> np.ndarray:
        """(N, 4) normalised cxcywh."""
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)

    def targets(self) -> dict[str, torch.Tensor]:
        return {
            "labels": torch.from_numpy(self.labels),
            "boxes": torch.from_numpy(self.boxes).float(),
        }

    def ground_truth(self) -> dict[str, np.ndarray]:
        """Evaluator input: normalised xyxy boxes and labels."""
        return {"boxes": cxcywh_to_xyxy_np(self.boxes), "labels": self.labels}


def _background(rng: np.random.Generator, hw: tuple[int, int], clutter: float) -> np.ndarray:
    h, w = hw
    base = rng.uniform(0.15, 0.85, size=3)
    coarse = rng.normal(0.0, 1.0, size=(max(h // 16, 2), max(w // 16, 2), 3))
    texture = np.asarray(
        Image.fromarray(((np.tanh(coarse) + 1) * 127.5).astype(np.uint8)).resize((w, h), Image.Resampling.BILINEAR),
        dtype=np.float64,
    ) / 255.0 - 0.5
    fine = rng.normal(0.0, 0.02, size=(h, w, 3))
    amplitude = 0.05 + 0.25 * clutter
    return np.clip(base + amplitude * texture + fine, 0.0, 1.0)


def _fill_colour(rng: np.random.Generator, background_mean: np.ndarray) -> tuple[int, int, int]:
    for _ in range(32):
        colour = rng.uniform(0.0, 1.0, size=3)
        if np.linalg.norm(colour - background_mean) >= 0.35:
            break
    return tuple(int(round(c * 255)) for c in colour)


def _place(
    rng: np.random.Generator, side: float, hw: tuple[int, int], taken: list[np.ndarray], allow_overlap: bool
) -> np.ndarray:
    """Pixel xyxy box of a side x side object inside the image."""
    h, w = hw
    box = None
    for _ in range(50):
        x0 = rng.uniform(0.0, w - side)
        y0 = rng.uniform(0.0, h - side)
        box = np.array([x0, y0, x0 + side, y0 + side])
        if not taken:
            return box
        iou = iou_matrix_np(box[None], np.stack(taken))[0]
        limit = 0.3 if allow_overlap else 0.0
        if iou.max() <= limit:
            return box
    return box


def render_scene(rng: np.random.Generator, spec: DatasetSpec) -> Scene:
    """Draw one scene from ``rng``."""
    h, w = spec.hw
    ss = spec.supersample
    background = _background(rng, spec.hw, spec.clutter)
    canvas = Image.fromarray((background * 255).round().astype(np.uint8)).resize((w * ss, h * ss), Image.Resampling.NEAREST)
    draw = ImageDraw.Draw(canvas)
    bg_mean = background.reshape(-1, 3).mean(0)

    n_objects = int(rng.integers(1, spec.max_objects, endpoint=True))
    mix = np.asarray(spec.class_mix) / sum(spec.class_mix)
    tiers = list(SizeTier)
    taken: list[np.ndarray] = []
    objects = []
    for _ in range(n_objects):
        label = int(rng.choice(len(CLASS_NAMES), p=mix))
        tier = tiers[int(rng.choice(len(tiers), p=TIER_MIX))]
        lo, hi = TIER_SIDES[tier]
        side = rng.uniform(lo, hi) * min(h, w)
        box = _place(rng, side, spec.hw, taken, allow_overlap=spec.clutter > 0.5)
        taken.append(box)
        colour = _fill_colour(rng, bg_mean)
        x0, y0, x1, y1 = (box * ss).tolist()
        # PIL treats the far corner as inclusive
        x1, y1 = x1 - 1, y1 - 1
        if CLASS_NAMES[label] == "circle":
            draw.ellipse([x0, y0, x1, y1], fill=colour)
        elif CLASS_NAMES[label] == "square":
            draw.rectangle([x0, y0, x1, y1], fill=colour)
        else:
            draw.polygon([((x0 + x1) / 2, y0), (x1, y1), (x0, y1)], fill=colour)
        cx, cy = (box[0] + box[2]) / 2 / w, (box[1] + box[3]) / 2 / h
        objects.append(SceneObject(label, (cx, cy, side / w, side / h), tier))

    image = np.asarray(canvas.resize((w, h), Image.Resampling.BOX), dtype=np.float32) / 255.0
    return Scene(image, objects)


def generate_dataset(seed: int, n_images: int, spec: DatasetSpec | None = None) -> list[Scene]:
    """Deterministic synthetic scenes.

    Args:
        seed: Dataset seed; scene ``i`` uses the generator seeded by (seed, i)
        n_images: Number of scenes, at least 1
        spec: Image size, class mix and clutter

    Raises:
        ValueError: If ``n_images`` < 1
    """
    if n_images < 1:
        raise ValueError(f"n_images must be at least 1, got {n_images}")
    spec = spec or DatasetSpec()
    scenes = [render_scene(np.random.default_rng([seed, i]), spec) for i in range(n_images)]
    logger.debug("Generated %d scenes (seed=%d, hw=%s, clutter=%.2f)", n_images, seed, spec.hw, spec.clutter)
    return scenes


def tier_counts(scenes: Sequence[Scene]) -> dict[str, int]:
    counts = {t.value: 0 for t in SizeTier}
    for scene in scenes:
        for obj in scene.objects:
            counts[obj.tier.value] += 1
    return counts


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_dataset(scenes: Sequence[Scene], root: str | os.PathLike) -> Path:
    """Write PNG images plus a COCO-like ``annotations.json`` under ``root``.

    Boxes are stored as pixel ``[x, y, w, h]``.
    """
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for image_id, scene in enumerate(scenes, start=1):
        h, w = scene.hw
        file_name = f"{image_id:06d}.png"
        Image.fromarray((scene.image * 255).round().astype(np.uint8)).save(root / IMAGE_DIR / file_name)
        images.append({"id": image_id, "file_name": file_name, "width": w, "height": h})
        for obj in scene.objects:
            cx, cy, bw, bh = obj.box
            bbox = [(cx - bw / 2) * w, (cy - bh / 2) * h, bw * w, bh * h]
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": obj.label + 1,
                    "bbox": bbox,
                    "area": bbox[2] * bbox[3],
                    "size_tier": obj.tier.value,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(CLASS_NAMES)],
    }
    path = root / ANNOTATION_FILE
    path.write_text(json.dumps(payload, indent=1))
    logger.info("Saved %d scenes to %s", len(scenes), root)
    return path


def load_dataset(root: str | os.PathLike) -> list[Scene]:
    """Read a directory written by :func:`save_dataset`.

    Raises:
        FileNotFoundError: If the annotation file is missing
    """
    root = Path(root)
    payload = json.loads((root / ANNOTATION_FILE).read_text())
    by_image: dict[int, list[Mapping[str, Any]]] = {}
    for ann in payload["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)
    scenes = []
    for info in payload["images"]:
        w, h = info["width"], info["height"]
        image = np.asarray(Image.open(root / IMAGE_DIR / info["file_name"]).convert("RGB"), dtype=np.float32) / 255.0
        objects = []
        for ann in by_image.get(info["id"], []):
            x, y, bw, bh = ann["bbox"]
            box = ((x + bw / 2) / w, (y + bh / 2) / h, bw / w, bh / h)
            tier = SizeTier(ann.get("size_tier") or size_tier_of(bw * bh / (w * h)))
            objects.append(SceneObject(int(ann["category_id"]) - 1, box, tier))
        scenes.append(Scene(image, objects))
    return scenes


class SceneDataset(Dataset):
    """Torch view of scenes: (image (3, H, W), target dict)."""

    def __init__(self, scenes: Sequence[Scene]):
        self.scenes = list(scenes)

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, index: int):
        scene = self.scenes[index]
        image = torch.from_numpy(np.ascontiguousarray(scene.image.transpose(2, 0, 1)))
        return image, scene.targets()


def collate_scenes(batch):
    images, targets = zip(*batch)
    return torch.stack(images), list(targets)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = (1, 10, 100)
AREA_RANGES: dict[str, tuple[float, float]] = {
    "all": (0.0, float("inf")),
    SizeTier.SMALL.value: (0.0, TIER_SIDES[SizeTier.SMALL][1] ** 2),
    SizeTier.MEDIUM.value: (TIER_SIDES[SizeTier.SMALL][1] ** 2, TIER_SIDES[SizeTier.MEDIUM][1] ** 2),
    SizeTier.LARGE.value: (TIER_SIDES[SizeTier.MEDIUM][1] ** 2, float("inf")),
}


@dataclass
class APReport:
    """COCO-style summary; a metric with no ground truth in range reads 0."""

    ap: float = 0.0
    ap50: float = 0.0
    ap75: float = 0.0
    ap_small: float = 0.0
    ap_medium: float = 0.0
    ap_large: float = 0.0
    ar1: float = 0.0
    ar10: float = 0.0
    ar100: float = 0.0
    ar_small: float = 0.0
    ar_medium: float = 0.0
    ar_large: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def summary(self) -> str:
        return " ".join(f"{k}={v:.4f}" for k, v in self.to_dict().items())


def _as_arrays(item, with_scores: bool) -> tuple[np.ndarray, ...]:
    get = item.get if isinstance(item, Mapping) else lambda k: getattr(item, k)

    def arr(value, dtype):
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        return np.asarray(value, dtype=dtype)

    boxes = arr(get("boxes"), np.float64).reshape(-1, 4)
    labels = arr(get("labels"), np.int64).reshape(-1)
    if not with_scores:
        return boxes, labels
    return boxes, labels, arr(get("scores"), np.float64).reshape(-1)


def _area(boxes: np.ndarray) -> np.ndarray:
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


@dataclass
class _ImageClass:
    det_scores: np.ndarray
    det_area: np.ndarray
    gt_area: np.ndarray
    iou: np.ndarray


def _match(entry: _ImageClass, thr: float, gt_ignore: np.ndarray, max_det: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Greedy matching of score-ordered detections; returns (scores, tp, ignore)."""
    n_det = min(len(entry.det_scores), max_det)
    gt_order = np.argsort(gt_ignore, kind="stable")
    ignore_sorted = gt_ignore[gt_order]
    iou = entry.iou[:n_det][:, gt_order] if n_det else np.zeros((0, len(gt_order)))
    gt_used = np.zeros(len(gt_order), dtype=bool)
    tp = np.zeros(n_det, dtype=bool)
    det_ignore = np.zeros(n_det, dtype=bool)
    for d in range(n_det):
        best, m = min(thr, 1 - 1e-10), -1
        for g in range(len(gt_order)):
            if gt_used[g]:
                continue
            if m > -1 and not ignore_sorted[m] and ignore_sorted[g]:
                break
            if iou[d, g] < best:
                continue
            best, m = iou[d, g], g
        if m > -1:
            gt_used[m] = True
            tp[d] = True
            det_ignore[d] = ignore_sorted[m]
    return entry.det_scores[:n_det], tp, det_ignore


def _precision_recall(
    entries: Sequence[_ImageClass], thr: float, area: tuple[float, float], max_det: int
) -> tuple[float, float] | None:
    """(101-point AP, final recall) for one class, or None without ground truth."""
    lo, hi = area
    scores, tps, ignores = [], [], []
    n_gt = 0
    for entry in entries:
        gt_ignore = (entry.gt_area < lo) | (entry.gt_area >= hi)
        n_gt += int((~gt_ignore).sum())
        s, tp, ign = _match(entry, thr, gt_ignore, max_det)
        out_of_range = (entry.det_area[: len(s)] < lo) | (entry.det_area[: len(s)] >= hi)
        ign = ign | (~tp & out_of_range)
        scores.append(s)
        tps.append(tp)
        ignores.append(ign)
    if n_gt == 0:
        return None
    scores = np.concatenate(scores) if scores else np.zeros(0)
    tps = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
    ignores = np.concatenate(ignores) if ignores else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    keep = ~ignores[order]
    tp_sorted = tps[order][keep]
    tp_cum = np.cumsum(tp_sorted).astype(np.float64)
    fp_cum = np.cumsum(~tp_sorted).astype(np.float64)
    if len(tp_cum) == 0:
        return 0.0, 0.0
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean()), float(recall[-1])


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else 0.0


def evaluate_map(
    predictions: Sequence[Any],
    ground_truth: Sequence[Any],
    iou_thresholds: Sequence[float] | None = None,
    num_classes: int = len(CLASS_NAMES),
) -> APReport:
    """COCO-style AP and AR with 101-point interpolation.

    Boxes are xyxy in normalised image coordinates; size tiers use areas as
    fractions of the image area. Detections are matched greedily by
    descending score (stable on input order), each ground truth at most once.

    Args:
        predictions: Per image, ``boxes``, ``scores`` and ``labels`` (mapping
            or object attributes, numpy or torch)
        ground_truth: Per image, ``boxes`` and ``labels``
        iou_thresholds: Thresholds averaged into ``ap``; defaults to 0.50:0.05:0.95
        num_classes: Size of the label space

    Raises:
        ValueError: If the two sequences differ in length
    """
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} prediction sets for {len(ground_truth)} images")
    thresholds = np.asarray(IOU_THRESHOLDS if iou_thresholds is None else iou_thresholds, dtype=np.float64)

    per_class: list[list[_ImageClass]] = [[] for _ in range(num_classes)]
    for pred, gt in zip(predictions, ground_truth):
        p_boxes, p_labels, p_scores = _as_arrays(pred, with_scores=True)
        g_boxes, g_labels = _as_arrays(gt, with_scores=False)
        for c in range(num_classes):
            d_mask, g_mask = p_labels == c, g_labels == c
            if not d_mask.any() and not g_mask.any():
                continue
            d_boxes, d_scores = p_boxes[d_mask], p_scores[d_mask]
            order = np.argsort(-d_scores, kind="mergesort")[: max(MAX_DETS)]
            d_boxes, d_scores = d_boxes[order], d_scores[order]
            per_class[c].append(
                _ImageClass(d_scores, _area(d_boxes), _area(g_boxes[g_mask]), iou_matrix_np(d_boxes, g_boxes[g_mask]))
            )

    def collect(thrs, area_key, max_det):
        aps, recalls = [], []
        for entries in per_class:
            for thr in thrs:
                result = _precision_recall(entries, float(thr), AREA_RANGES[area_key], max_det)
                if result is not None:
                    aps.append(result[0])
                    recalls.append(result[1])
        return _mean(aps), _mean(recalls)

    ap_all, ar100 = collect(thresholds, "all", 100)
    return APReport(
        ap=ap_all,
        ap50=collect([0.5], "all", 100)[0],
        ap75=collect([0.75], "all", 100)[0],
        ap_small=collect(thresholds, SizeTier.SMALL.value, 100)[0],
        ap_medium=collect(thresholds, SizeTier.MEDIUM.value, 100)[0],
        ap_large=collect(thresholds, SizeTier.LARGE.value, 100)[0],
        ar1=collect(thresholds, "all", 1)[1],
        ar10=collect(thresholds, "all", 10)[1],
        ar100=ar100,
        ar_small=collect(thresholds, SizeTier.SMALL.value, 100)[1],
        ar_medium=collect(thresholds, SizeTier.MEDIUM.value, 100)[1],
        ar_large=collect(thresholds, SizeTier.LARGE.value, 100)[1],
    )
