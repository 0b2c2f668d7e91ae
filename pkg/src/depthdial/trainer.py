"""
Two-pass self-distillation training.

Each iteration runs the super-net on a batch, steps the optimiser on its
ground-truth loss, then runs the base-net on the same batch against the
(detached) super-net predictions and boundary features and steps again.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader

from .boxes import cxcywh_to_xyxy
from .config import ArchSpec, DepthConfiguration
from .data import APReport, Scene, SceneDataset, collate_scenes, evaluate_map
from .errors import CheckpointError, NonFiniteLossError
from .losses import KDHyper, LossBreakdown, base_total_loss, detection_gt_loss, distillation_terms
from .model import CaptureMode, DetectorModel, build_detector, predict
from .settings import Schedule

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
METRICS_FILE = "metrics.csv"
BEST_CHECKPOINT = "best.pt"
LAST_CHECKPOINT = "last.pt"


def set_determinism(seed: int, deterministic: bool = True) -> None:
    """Seed every generator; with ``deterministic`` also force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)
    torch.backends.cudnn.deterministic = deterministic
    torch.backends.cudnn.benchmark = not deterministic


def cosine_lambda(total_steps: int):
    """Multiplier for cosine decay from 1 to 0 over ``total_steps``."""

    def factor(step: int) -> float:
        if total_steps <= 0:
            return 1.0
        return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))

    return factor


@dataclass
class TrainState:
    """Model, optimiser and bookkeeping of one training run."""

    model: DetectorModel
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    hyper: KDHyper
    schedule: Schedule
    seed: int
    step: int = 0
    history: list[tuple[dict[str, float], dict[str, float]]] = field(default_factory=list)
    rng_state: dict[str, Any] | None = None

    @property
    def arch(self) -> ArchSpec:
        return self.model.arch

    @property
    def stage_groups(self) -> dict[str, str]:
        return {s.stage_id: self.arch.group_of(s.stage_id) for s in self.arch.adaptable_stages}

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


def create_train_state(
    arch: ArchSpec, hyper: KDHyper | None = None, schedule: Schedule | None = None, seed: int = 0
) -> TrainState:
    """Fresh model with AdamW and cosine decay over ``schedule.steps``."""
    hyper = hyper or KDHyper.for_head(arch.head_kind)
    schedule = schedule or Schedule()
    model = build_detector(arch, seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, cosine_lambda(schedule.steps))
    return TrainState(model, optimizer, scheduler, hyper, schedule, seed)


def _check_finite(breakdown: LossBreakdown, step: int, phase: str) -> None:
    if breakdown.is_finite():
        return
    components = breakdown.scalars()
    logger.error("Non-finite %s loss at step %d: %s", phase, step, components)
    raise NonFiniteLossError(step, phase, components)


def _optimise(state: TrainState, loss: torch.Tensor) -> None:
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if state.schedule.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), state.schedule.grad_clip)
    state.optimizer.step()


def super_pass(state: TrainState, images: torch.Tensor, targets: Sequence[dict]) -> tuple[Any, LossBreakdown, list]:
    """Forward and ground-truth loss of the super-net (no optimiser step)."""
    arch = state.arch
    capture = CaptureMode.TAKEN if state.hyper.distills else CaptureMode.NONE
    outputs = state.model(images, DepthConfiguration.super_net(arch), capture)
    breakdown, assignments = detection_gt_loss(outputs, targets, arch.head_kind, state.hyper.gt_weights)
    return outputs, breakdown, assignments


def base_pass(
    state: TrainState,
    images: torch.Tensor,
    targets: Sequence[dict],
    teacher=None,
    teacher_assignments: Sequence | None = None,
) -> tuple[Any, LossBreakdown]:
    """Forward and combined loss of the base-net against a detached teacher."""
    arch = state.arch
    hyper = state.hyper
    capture = CaptureMode.TAKEN if hyper.distills else CaptureMode.NONE
    config = DepthConfiguration.base_net(arch)
    outputs = state.model(images, config, capture)
    gt, assignments = detection_gt_loss(outputs, targets, arch.head_kind, hyper.gt_weights)
    kd = {}
    if hyper.distills and teacher is not None:
        kd = distillation_terms(
            teacher, outputs, arch.head_kind, hyper, state.stage_groups, teacher_assignments, assignments
        )
    return outputs, base_total_loss(gt, kd, hyper)


def train_step(state: TrainState, batch) -> tuple[TrainState, dict[str, Any]]:
    """One iteration: super-net step, then base-net step on the same batch.

    Raises:
        NonFiniteLossError: If either pass produces a NaN or Inf loss
    """
    images, targets = batch
    state.model.train()
    state.rng_state = None

    outputs, super_loss, super_assign = super_pass(state, images, targets)
    _check_finite(super_loss, state.step, "super")
    _optimise(state, super_loss.total)
    teacher = outputs.detached()

    _, base_loss = base_pass(state, images, targets, teacher, super_assign)
    _check_finite(base_loss, state.step, "base")
    _optimise(state, base_loss.total)

    lr = state.lr
    state.scheduler.step()
    state.step += 1
    super_scalars, base_scalars = super_loss.scalars(), base_loss.scalars()
    state.history.append((super_scalars, base_scalars))
    return state, {"step": state.step, "super": super_scalars, "base": base_scalars, "lr": lr}


def scene_loader(data, batch_size: int, shuffle: bool = False, seed: int = 0) -> DataLoader:
    if isinstance(data, DataLoader):
        return data
    dataset = data if isinstance(data, SceneDataset) else SceneDataset(data)
    generator = torch.Generator().manual_seed(seed) if shuffle else None
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
        collate_fn=collate_scenes,
        drop_last=shuffle and len(dataset) >= batch_size,
    )


@torch.no_grad()
def collect_predictions(model: DetectorModel, data, config: DepthConfiguration, batch_size: int = 16):
    """(detections, ground truth) per image, boxes in normalised xyxy."""
    was_training = model.training
    predictions, ground_truth = [], []
    for images, targets in scene_loader(data, batch_size):
        predictions.extend(predict(model, images, config))
        ground_truth.extend(
            {"boxes": cxcywh_to_xyxy(t["boxes"]).numpy(), "labels": t["labels"].numpy()} for t in targets
        )
    model.train(was_training)
    return predictions, ground_truth


def evaluate_model(model: DetectorModel, data, config: DepthConfiguration, batch_size: int = 16) -> APReport:
    """APReport of ``model`` run under ``config`` on scenes, a SceneDataset or a DataLoader."""
    predictions, ground_truth = collect_predictions(model, data, config, batch_size)
    return evaluate_map(predictions, ground_truth, num_classes=model.arch.num_classes)


def _metrics_row(metrics: dict[str, Any], evaluation: dict[str, float] | None) -> dict[str, Any]:
    row: dict[str, Any] = {"step": metrics["step"]}
    row.update({f"super_{k}": v for k, v in metrics["super"].items()})
    row.update({f"base_{k}": v for k, v in metrics["base"].items()})
    row["lr"] = metrics["lr"]
    row["super_ap50"] = evaluation["super_ap50"] if evaluation else float("nan")
    row["base_ap50"] = evaluation["base_ap50"] if evaluation else float("nan")
    return row


def append_metrics(path: Path, row: dict[str, Any]) -> None:
    pd.DataFrame([row]).to_csv(path, mode="a", header=not path.exists(), index=False)


def train(
    state: TrainState,
    dataset: Sequence[Scene] | SceneDataset,
    schedule: Schedule | None = None,
    val_dataset: Sequence[Scene] | SceneDataset | None = None,
    out_dir: str | os.PathLike | None = None,
) -> TrainState:
    """Run ``schedule.steps`` iterations over shuffled batches.

    With ``val_dataset`` both extremes are evaluated every ``eval_every``
    steps and at the end. With ``out_dir`` the metrics stream, the best
    (by super-net AP@0.5) and the last checkpoint are written there.

    Raises:
        ValueError: If ``dataset`` is empty
    """
    schedule = schedule or state.schedule
    if len(dataset) == 0:
        raise ValueError("Cannot train on an empty dataset")
    if schedule.steps == 0:
        return state
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    loader = scene_loader(dataset, schedule.batch_size, shuffle=True, seed=state.seed)
    arch = state.arch
    best = -1.0
    target_step = state.step + schedule.steps
    logger.info("Training %s head for %d steps (seed=%d)", arch.head_kind.value, schedule.steps, state.seed)
    while state.step < target_step:
        for batch in loader:
            state, metrics = train_step(state, batch)
            last = state.step == target_step
            evaluation = None
            if val_dataset is not None and (state.step % schedule.eval_every == 0 or last):
                super_ap = evaluate_model(state.model, val_dataset, DepthConfiguration.super_net(arch))
                base_ap = evaluate_model(state.model, val_dataset, DepthConfiguration.base_net(arch))
                evaluation = {"super_ap50": super_ap.ap50, "base_ap50": base_ap.ap50}
                logger.info(
                    "eval step %d: super AP50=%.4f AP=%.4f | base AP50=%.4f AP=%.4f",
                    state.step, super_ap.ap50, super_ap.ap, base_ap.ap50, base_ap.ap,
                )
                if out is not None and super_ap.ap50 > best:
                    best = super_ap.ap50
                    save_checkpoint(state, out / BEST_CHECKPOINT)
            if state.step % schedule.log_every == 0 or last or evaluation:
                logger.info(
                    "step %d: super=%.4f base=%.4f lr=%.2e",
                    state.step, metrics["super"]["total"], metrics["base"]["total"], metrics["lr"],
                )
                if out is not None:
                    append_metrics(out / METRICS_FILE, _metrics_row(metrics, evaluation))
            if last:
                break
    if out is not None:
        save_checkpoint(state, out / LAST_CHECKPOINT)
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _capture_rng() -> dict[str, Any]:
    np_state = np.random.get_state(legacy=False)
    return {
        "torch": torch.get_rng_state(),
        "numpy_key": torch.from_numpy(np_state["state"]["key"].astype(np.int64)),
        "numpy_pos": int(np_state["state"]["pos"]),
        "python": random.getstate(),
    }


def _restore_rng(rng: dict[str, Any]) -> None:
    torch.set_rng_state(rng["torch"])
    np.random.set_state(
        {
            "bit_generator": "MT19937",
            "state": {"key": rng["numpy_key"].numpy().astype(np.uint32), "pos": rng["numpy_pos"]},
            "has_gauss": 0,
            "gauss": 0.0,
        }
    )
    version, internal, gauss = rng["python"]
    random.setstate((version, tuple(internal), gauss))


def sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    """Write the parameter blob and its JSON sidecar.

    The sidecar records the schema version, step, architecture (and its
    hash), hyperparameters, schedule, seed and the blob's sha256.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "scheduler": state.scheduler.state_dict(),
        "step": state.step,
        "history": [[list(s.items()), list(b.items())] for s, b in state.history],
        "rng": state.rng_state or _capture_rng(),
    }
    buffer = io.BytesIO()
    torch.save(blob, buffer)
    payload = buffer.getvalue()
    atomic_write(path, payload)
    meta = {
        "schema_version": CHECKPOINT_SCHEMA,
        "step": state.step,
        "seed": state.seed,
        "arch": state.arch.to_dict(),
        "arch_hash": state.arch.spec_hash(),
        "hyper": state.hyper.to_dict(),
        "schedule": state.schedule.to_dict(),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    atomic_write(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True).encode())
    logger.debug("Saved checkpoint step %d to %s", state.step, path)
    return path


def read_checkpoint_meta(path: str | os.PathLike) -> dict[str, Any]:
    """Sidecar metadata of a checkpoint.

    Raises:
        CheckpointError: If the sidecar is missing, unreadable or of another schema
    """
    meta_path = sidecar_path(path)
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError as e:
        raise CheckpointError(f"{path}: missing metadata sidecar {meta_path.name}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt metadata sidecar ({e})") from e
    version = meta.get("schema_version")
    if version != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: checkpoint schema version {version}, expected {CHECKPOINT_SCHEMA}")
    return meta


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    """Rebuild a TrainState and restore the global generators.

    Raises:
        CheckpointError: On schema mismatch, checksum mismatch or an unreadable blob
    """
    path = Path(path)
    meta = read_checkpoint_meta(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})") from e
    if hashlib.sha256(payload).hexdigest() != meta.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch (schema version {CHECKPOINT_SCHEMA}); file is corrupt")
    try:
        blob = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
        arch = ArchSpec.from_dict(meta["arch"])
        hyper = KDHyper.from_dict(meta["hyper"])
        schedule = Schedule.from_dict(meta["schedule"])
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e

    state = create_train_state(arch, hyper, schedule, meta["seed"])
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.scheduler.load_state_dict(blob["scheduler"])
    state.step = blob["step"]
    state.history = [(dict(s), dict(b)) for s, b in blob["history"]]
    state.rng_state = blob["rng"]
    _restore_rng(blob["rng"])
    return state
