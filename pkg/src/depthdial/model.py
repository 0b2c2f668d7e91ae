"""
Miniature multi-scale detectors with configurable depth.

:func:`build_detector` assembles a stem, the adaptive backbone stages
(P2..P5), an FPN-then-PAN neck of adaptive stages, and either a
set-prediction head (transformer decoder with an auxiliary head per layer)
or a dense anchor-point head. :meth:`DetectorModel.forward` routes every
stage through the path named by a :class:`DepthConfiguration`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision.ops import batched_nms

from .boxes import cxcywh_to_xyxy, xyxy_to_cxcywh
from .config import ArchSpec, DepthConfiguration, ExecutionMode, HeadKind, validate_config
from .errors import InvalidConfigError, InvalidSpecError
from .registry import ComponentRegistry
from .stages import ConvNormAct, StageOutput, create_stage_registry

# dense-head post-processing
SCORE_THRESHOLD = 0.05
NMS_IOU = 0.65
MAX_DETECTIONS = 100


class CaptureMode(str, Enum):
    NONE = "none"
    TAKEN = "taken"
    BOTH = "both"


class BoundaryPair(NamedTuple):
    essential: Tensor | None
    full: Tensor | None


@dataclass
class LayerPrediction:
    cls_logits: Tensor
    boxes: Tensor


@dataclass
class ModelOutputs:
    """One forward pass.

    ``cls_logits`` is (B, N, num_classes) and ``boxes`` (B, N, 4) normalised
    cxcywh, with N the number of queries or anchor points. Dense heads also
    fill ``edge_logits`` (B, N, 4, bins) and the anchor tensors.
    """

    cls_logits: Tensor
    boxes: Tensor
    boundary_features: dict[str, BoundaryPair] = field(default_factory=dict)
    decoder_aux: list[LayerPrediction] = field(default_factory=list)
    edge_logits: Tensor | None = None
    anchor_points: Tensor | None = None
    anchor_scale: Tensor | None = None

    def detached(self) -> "ModelOutputs":
        """Copy with every tensor cut from the autograd graph (teacher side)."""

        def cut(t):
            return None if t is None else t.detach()

        return replace(
            self,
            cls_logits=self.cls_logits.detach(),
            boxes=self.boxes.detach(),
            boundary_features={
                k: BoundaryPair(cut(p.essential), cut(p.full)) for k, p in self.boundary_features.items()
            },
            decoder_aux=[LayerPrediction(p.cls_logits.detach(), p.boxes.detach()) for p in self.decoder_aux],
            edge_logits=cut(self.edge_logits),
        )


@dataclass
class Detections:
    """Post-processed detections of one image (normalised xyxy boxes)."""

    boxes: Tensor
    scores: Tensor
    labels: Tensor


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


def sine_position_embedding(h: int, w: int, dim: int, device=None, dtype=None) -> Tensor:
    """2-D sine/cosine embedding of normalised cell centres, shape (h*w, dim)."""
    quarter = dim // 4
    ys = (torch.arange(h, device=device, dtype=torch.float64) + 0.5) / h
    xs = (torch.arange(w, device=device, dtype=torch.float64) + 0.5) / w
    freq = 1.0 / (10000 ** (torch.arange(quarter, device=device, dtype=torch.float64) / max(quarter, 1)))
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    parts = []
    for g in (gx.reshape(-1, 1), gy.reshape(-1, 1)):
        arg = 2 * math.pi * g * freq
        parts += [arg.sin(), arg.cos()]
    emb = torch.cat(parts, dim=1)
    if emb.shape[1] < dim:
        emb = F.pad(emb, (0, dim - emb.shape[1]))
    return emb.to(dtype or torch.get_default_dtype())


def make_anchors(
    arch: ArchSpec, image_hw: tuple[int, int], device=None, dtype=None
) -> tuple[Tensor, Tensor]:
    """Grid-cell centres of every head scale, finest first.

    Returns:
        points (A, 2) normalised (x, y), and scale (A, 2): one stride in
        normalised x and y units
    """
    h, w = image_hw
    points, scales = [], []
    for stride, _ in arch.head_inputs():
        gh, gw = h // stride, w // stride
        ys = (torch.arange(gh, device=device, dtype=torch.float64) + 0.5) * stride / h
        xs = (torch.arange(gw, device=device, dtype=torch.float64) + 0.5) * stride / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        points.append(torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1))
        scales.append(torch.tensor([stride / w, stride / h], dtype=torch.float64, device=device).expand(gh * gw, 2))
    dtype = dtype or torch.get_default_dtype()
    return torch.cat(points).to(dtype), torch.cat(scales).to(dtype)


def edge_distances(edge_logits: Tensor) -> Tensor:
    """Expected distance (in strides) per edge from bin logits (..., 4, bins)."""
    bins = torch.arange(edge_logits.shape[-1], device=edge_logits.device, dtype=edge_logits.dtype)
    return edge_logits.softmax(-1) @ bins


def dense_decode(edge_logits: Tensor, anchor_points: Tensor, anchor_scale: Tensor) -> Tensor:
    """Decode (l, t, r, b) bin logits into cxcywh boxes clipped to [0, 1]."""
    dist = edge_distances(edge_logits)
    scale = anchor_scale.repeat(1, 2)
    lt, rb = (dist * scale).split(2, dim=-1)
    x1y1 = (anchor_points - lt).clamp(0.0, 1.0)
    x2y2 = (anchor_points + rb).clamp(0.0, 1.0)
    return xyxy_to_cxcywh(torch.cat([x1y1, x2y2], dim=-1))


class SetPredictionHead(nn.Module):
    """Transformer decoder over flattened multi-scale memory.

    Every layer refines the boxes of the previous one and owns its own class
    and box heads, so any layer is a valid exit.
    """

    def __init__(self, arch: ArchSpec):
        super().__init__()
        d = arch.hidden_dim
        inputs = arch.head_inputs()
        self.num_layers = arch.decoder_layers
        self.input_proj = nn.ModuleList(nn.Conv2d(ch, d, 1) for _, ch in inputs)
        self.level_embed = nn.Parameter(torch.randn(len(inputs), d) * 0.02)
        self.query_embed = nn.Embedding(arch.num_queries, d)
        self.ref_embed = nn.Embedding(arch.num_queries, 4)
        self.layers = nn.ModuleList(
            nn.TransformerDecoderLayer(d, arch.num_heads, arch.ffn_dim, dropout=0.0, batch_first=True)
            for _ in range(arch.decoder_layers)
        )
        self.cls_heads = nn.ModuleList(nn.Linear(d, arch.num_classes) for _ in range(arch.decoder_layers))
        self.box_heads = nn.ModuleList(
            nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, 4)) for _ in range(arch.decoder_layers)
        )
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        with torch.no_grad():
            q = self.ref_embed.weight.shape[0]
            centres = torch.rand(q, 2) * 0.8 + 0.1
            sizes = torch.full((q, 2), 0.2)
            self.ref_embed.weight.copy_(inverse_sigmoid(torch.cat([centres, sizes], dim=1)))
            prior = -math.log((1 - 0.01) / 0.01)
            for head in self.cls_heads:
                nn.init.constant_(head.bias, prior)
            for head in self.box_heads:
                nn.init.zeros_(head[-1].weight)
                nn.init.zeros_(head[-1].bias)

    def memory(self, feats: list[Tensor]) -> Tensor:
        tokens = []
        for level, (proj, feat) in enumerate(zip(self.input_proj, feats)):
            x = proj(feat)
            b, d, h, w = x.shape
            pos = sine_position_embedding(h, w, d, x.device, x.dtype)
            tokens.append(x.flatten(2).transpose(1, 2) + pos + self.level_embed[level])
        return torch.cat(tokens, dim=1)

    def initial_queries(self, batch: int) -> tuple[Tensor, Tensor]:
        tgt = self.query_embed.weight.unsqueeze(0).expand(batch, -1, -1)
        ref = self.ref_embed.weight.sigmoid().unsqueeze(0).expand(batch, -1, -1)
        return tgt, ref

    def forward(self, feats: list[Tensor], exit_depth: int) -> list[LayerPrediction]:
        memory = self.memory(feats)
        return decoder_forward_with_exit(self, self.initial_queries(memory.shape[0]), memory, exit_depth)


def decoder_forward_with_exit(
    head: SetPredictionHead, queries: tuple[Tensor, Tensor], memory: Tensor, exit_depth: int
) -> list[LayerPrediction]:
    """Run decoder layers 1..exit_depth, recording every layer's prediction.

    Args:
        head: The set-prediction head
        queries: (content, reference boxes) of shape (B, Q, d) and (B, Q, 4)
        memory: Flattened encoder memory (B, N, d)
        exit_depth: Number of layers to run

    Raises:
        InvalidConfigError: If exit_depth is outside [1, D]
    """
    if not 1 <= exit_depth <= head.num_layers:
        raise InvalidConfigError(f"exit depth {exit_depth} outside [1, {head.num_layers}]")
    tgt, ref = queries
    predictions = []
    for i in range(exit_depth):
        tgt = head.layers[i](tgt, memory)
        boxes = (head.box_heads[i](tgt) + inverse_sigmoid(ref)).sigmoid()
        predictions.append(LayerPrediction(head.cls_heads[i](tgt), boxes))
        ref = boxes.detach()
    return predictions


class DenseHead(nn.Module):
    """Per-scale classification and box towers over grid-cell anchor points."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        d = arch.hidden_dim
        self.arch = arch
        self.cls_towers = nn.ModuleList(
            nn.Sequential(ConvNormAct(ch, d, 3), nn.Conv2d(d, arch.num_classes, 1)) for _, ch in arch.head_inputs()
        )
        self.box_towers = nn.ModuleList(
            nn.Sequential(ConvNormAct(ch, d, 3), nn.Conv2d(d, 4 * arch.reg_bins, 1)) for _, ch in arch.head_inputs()
        )
        prior = -math.log((1 - 0.01) / 0.01)
        for tower in self.cls_towers:
            nn.init.constant_(tower[-1].bias, prior)

    def forward(self, feats: list[Tensor], image_hw: tuple[int, int]) -> ModelOutputs:
        cls, edges = [], []
        bins = self.arch.reg_bins
        for cls_tower, box_tower, feat in zip(self.cls_towers, self.box_towers, feats):
            b = feat.shape[0]
            cls.append(cls_tower(feat).flatten(2).transpose(1, 2))
            e = box_tower(feat).flatten(2).transpose(1, 2)
            edges.append(e.reshape(b, -1, 4, bins))
        cls_logits = torch.cat(cls, dim=1)
        edge_logits = torch.cat(edges, dim=1)
        points, scale = make_anchors(self.arch, image_hw, feats[0].device, feats[0].dtype)
        return ModelOutputs(
            cls_logits=cls_logits,
            boxes=dense_decode(edge_logits, points, scale),
            edge_logits=edge_logits,
            anchor_points=points,
            anchor_scale=scale,
        )


def create_head_registry() -> ComponentRegistry:
    registry = ComponentRegistry("head")
    registry.register(HeadKind.SET_PREDICTION.value, SetPredictionHead, "Query decoder with per-layer exits")
    registry.register(HeadKind.DENSE.value, DenseHead, "Anchor-point towers with distribution edges")
    return registry


class DetectorModel(nn.Module):
    """Backbone, neck and head assembled from an :class:`ArchSpec`."""

    def __init__(
        self,
        arch: ArchSpec,
        stage_registry: ComponentRegistry | None = None,
        head_registry: ComponentRegistry | None = None,
    ):
        super().__init__()
        self.arch = arch
        stage_registry = stage_registry or create_stage_registry()
        head_registry = head_registry or create_head_registry()
        options = {"switchable_bn": arch.switchable_bn, "switchable_aggregator": arch.switchable_aggregator}

        first = arch.backbone_stages[0]
        n_stem = int(math.log2(first.spatial_scale))
        widths = [3] + [arch.stem_channels] * (n_stem - 1) + [first.in_channels]
        self.stem = nn.Sequential(*(ConvNormAct(widths[i], widths[i + 1], 3, 2) for i in range(n_stem)))

        self.stages = nn.ModuleDict()
        self.transitions = nn.ModuleDict()
        prev = None
        for spec in arch.backbone_stages:
            if prev is not None:
                ratio = spec.spatial_scale // prev.spatial_scale
                self.transitions[spec.stage_id] = ConvNormAct(prev.out_channels, spec.in_channels, 3, ratio)
            self.stages[spec.stage_id] = stage_registry.get(spec.kind.value)(spec, **options)
            prev = spec
        for link, spec in zip(arch.neck_links(), arch.neck_stages):
            if link.source_scale < spec.spatial_scale:
                ratio = spec.spatial_scale // link.source_scale
                self.transitions[spec.stage_id] = ConvNormAct(link.source_channels, link.source_channels, 3, ratio)
            elif link.source_scale > spec.spatial_scale:
                self.transitions[spec.stage_id] = nn.Upsample(
                    scale_factor=link.source_scale // spec.spatial_scale, mode="nearest"
                )
            self.stages[spec.stage_id] = stage_registry.get(spec.kind.value)(spec, **options)
        self.head = head_registry.get(arch.head_kind.value)(arch)

    def _run_stage(
        self,
        stage_id: str,
        x: Tensor,
        config: DepthConfiguration,
        capture: CaptureMode,
        boundaries: dict[str, BoundaryPair],
    ) -> Tensor:
        mode = config.mode_of(stage_id)
        stage = self.stages[stage_id]
        out: StageOutput = stage(
            x, mode, capture=capture is not CaptureMode.NONE, essential_in_full=capture is CaptureMode.BOTH
        )
        if capture is not CaptureMode.NONE and stage.spec.adaptable:
            boundaries[stage_id] = BoundaryPair(out.boundary_essential, out.boundary_full)
        return out.output

    def features(
        self, images: Tensor, config: DepthConfiguration, capture: CaptureMode = CaptureMode.NONE
    ) -> tuple[list[Tensor], dict[str, BoundaryPair]]:
        """Backbone and neck only: head input maps plus captured boundaries."""
        boundaries: dict[str, BoundaryPair] = {}
        x = self.stem(images)
        feats: dict[int, Tensor] = {}
        for spec in self.arch.backbone_stages:
            if spec.stage_id in self.transitions:
                x = self.transitions[spec.stage_id](x)
            x = self._run_stage(spec.stage_id, x, config, capture, boundaries)
            feats[spec.spatial_scale] = x
        prev = x
        for spec in self.arch.neck_stages:
            src = self.transitions[spec.stage_id](prev) if spec.stage_id in self.transitions else prev
            fused = torch.cat([src, feats[spec.spatial_scale]], dim=1)
            prev = self._run_stage(spec.stage_id, fused, config, capture, boundaries)
            feats[spec.spatial_scale] = prev
        return [feats[scale] for scale, _ in self.arch.head_inputs()], boundaries

    def forward(
        self, images: Tensor, config: DepthConfiguration, capture: CaptureMode | str = CaptureMode.NONE
    ) -> ModelOutputs:
        """Configurable-depth forward pass.

        Args:
            images: (B, 3, H, W) with H and W divisible by the largest stride
            config: Depth configuration valid for this architecture
            capture: Which stage boundaries to record

        Raises:
            InvalidConfigError: If the configuration or input size does not fit
        """
        validate_config(self.arch, config)
        capture = CaptureMode(capture)
        h, w = images.shape[-2:]
        stride = self.arch.max_stride
        if h % stride or w % stride:
            raise InvalidConfigError(f"Input {h}x{w} not divisible by max stride {stride}")

        feats, boundaries = self.features(images, config, capture)
        if self.arch.head_kind is HeadKind.SET_PREDICTION:
            layers = self.head(feats, config.decoder_exit)
            out = ModelOutputs(layers[-1].cls_logits, layers[-1].boxes, decoder_aux=layers)
        else:
            out = self.head(feats, (h, w))
        out.boundary_features = boundaries
        return out


def build_detector(arch: ArchSpec, seed: int = 0) -> DetectorModel:
    """Build a detector with parameters fully determined by ``seed``.

    The global RNG state is left untouched.

    Raises:
        InvalidSpecError: If the architecture cannot be built
    """
    if not isinstance(arch, ArchSpec):
        raise InvalidSpecError(f"Expected ArchSpec, got {type(arch).__name__}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DetectorModel(arch)


def forward(
    model: DetectorModel,
    images: Tensor,
    config: DepthConfiguration,
    capture: CaptureMode | str = CaptureMode.NONE,
) -> ModelOutputs:
    return model(images, config, capture)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@torch.no_grad()
def predict(
    model: DetectorModel,
    images: Tensor,
    config: DepthConfiguration,
    score_threshold: float = SCORE_THRESHOLD,
    nms_iou: float = NMS_IOU,
    max_detections: int = MAX_DETECTIONS,
) -> list[Detections]:
    """Inference with post-processing; the model is put in eval mode.

    Set-prediction heads keep the top ``max_detections`` (query, class) pairs
    without NMS. Dense heads drop scores below ``score_threshold`` and run
    class-wise NMS at ``nms_iou``.
    """
    model.eval()
    out = model(images, config)
    probs = out.cls_logits.sigmoid()
    boxes = cxcywh_to_xyxy(out.boxes)
    num_classes = probs.shape[-1]
    results = []
    for prob, box in zip(probs, boxes):
        if model.arch.head_kind is HeadKind.SET_PREDICTION:
            k = min(max_detections, prob.numel())
            scores, idx = prob.flatten().topk(k)
            results.append(Detections(box[idx // num_classes], scores, idx % num_classes))
            continue
        anchor_idx, labels = (prob > score_threshold).nonzero(as_tuple=True)
        scores = prob[anchor_idx, labels]
        candidates = box[anchor_idx]
        keep = batched_nms(candidates, scores, labels, nms_iou)[:max_detections]
        results.append(Detections(candidates[keep], scores[keep], labels[keep]))
    return results


__all__ = [
    "CaptureMode",
    "BoundaryPair",
    "LayerPrediction",
    "ModelOutputs",
    "Detections",
    "SetPredictionHead",
    "DenseHead",
    "DetectorModel",
    "build_detector",
    "forward",
    "decoder_forward_with_exit",
    "predict",
    "count_parameters",
    "create_head_registry",
    "make_anchors",
    "dense_decode",
    "edge_distances",
    "ExecutionMode",
]
