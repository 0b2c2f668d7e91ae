"""
depthdial: any-depth multi-scale object detection.

One set of weights serves every depth configuration: each adaptable stage
runs either its essential prefix or its full block stack, and a
set-prediction decoder may exit early.

Example:
    >>> from depthdial import DepthConfiguration, build_detector, forward, toy_arch
    >>> import torch
    >>>
    >>> arch = toy_arch("dense")
    >>> model = build_detector(arch, seed=0)
    >>> config = DepthConfiguration.base_net(arch)
    >>> outputs = forward(model, torch.rand(2, 3, 128, 128), config)
"""

__version__ = "0.1.0"

from .analysis import CkaReport, SweepResult, cka_report, depth_sweep, linear_cka, pr_breakdown
from .assignment import align_teacher_queries, hungarian_match, kd_anchor_sets, tal_assign
from .config import (
    ArchSpec,
    DepthConfiguration,
    ExecutionMode,
    HeadKind,
    StageKind,
    StageSpec,
    enumerate_configs,
    flops_estimate,
    parse_depth_config,
    split_point,
    toy_arch,
    validate_config,
)
from .data import APReport, DatasetSpec, Scene, evaluate_map, generate_dataset
from .errors import (
    CheckpointError,
    DepthdialError,
    InfeasibleMatchError,
    InvalidConfigError,
    InvalidSpecError,
    NonFiniteLossError,
    UndefinedSimilarityError,
)
from .losses import KDHyper, detection_gt_loss, distillation_terms, kd_cls_loss, kd_feat_loss, kd_reg_loss
from .model import CaptureMode, DetectorModel, ModelOutputs, build_detector, forward, predict
from .registry import ComponentRegistry
from .settings import RunSettings, Schedule
from .trainer import TrainState, create_train_state, load_checkpoint, save_checkpoint, train, train_step

__all__ = [
    "APReport",
    "ArchSpec",
    "CaptureMode",
    "CheckpointError",
    "CkaReport",
    "ComponentRegistry",
    "DatasetSpec",
    "DepthConfiguration",
    "DepthdialError",
    "DetectorModel",
    "ExecutionMode",
    "HeadKind",
    "InfeasibleMatchError",
    "InvalidConfigError",
    "InvalidSpecError",
    "KDHyper",
    "ModelOutputs",
    "NonFiniteLossError",
    "RunSettings",
    "Scene",
    "Schedule",
    "StageKind",
    "StageSpec",
    "SweepResult",
    "TrainState",
    "UndefinedSimilarityError",
    "align_teacher_queries",
    "build_detector",
    "cka_report",
    "create_train_state",
    "depth_sweep",
    "detection_gt_loss",
    "distillation_terms",
    "enumerate_configs",
    "evaluate_map",
    "flops_estimate",
    "forward",
    "generate_dataset",
    "hungarian_match",
    "kd_anchor_sets",
    "kd_cls_loss",
    "kd_feat_loss",
    "kd_reg_loss",
    "linear_cka",
    "load_checkpoint",
    "parse_depth_config",
    "pr_breakdown",
    "predict",
    "save_checkpoint",
    "split_point",
    "tal_assign",
    "toy_arch",
    "train",
    "train_step",
    "validate_config",
    "__version__",
]
