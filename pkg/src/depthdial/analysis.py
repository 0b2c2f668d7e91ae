"""
Post-training analysis: stage-wise modularity via linear CKA, depth sweeps
with their Pareto front, and paired AP/AR breakdowns.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from .config import BACKBONE, NECK, ArchSpec, DepthConfiguration, enumerate_configs, flops_estimate
from .data import APReport, evaluate_map
from .errors import UndefinedSimilarityError
from .model import CaptureMode, DetectorModel
from .trainer import collect_predictions, scene_loader

logger = logging.getLogger(__name__)

POOL_SIZE = 4
DEFAULT_MAX_SAMPLES = 20_000
DEFAULT_BATCHES = 500
DEFAULT_BOOTSTRAP = 500


def _as_double(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    return x.detach().to(torch.float64)


def linear_cka(x, y) -> float:
    """Linear CKA between two (n, p) and (n, q) feature matrices.

    Columns are centred, then ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)``.

    Raises:
        UndefinedSimilarityError: If n < 2, the row counts differ, or either
            input has zero variance
    """
    x, y = _as_double(x), _as_double(y)
    if x.dim() != 2 or y.dim() != 2 or x.shape[0] != y.shape[0]:
        raise UndefinedSimilarityError(f"CKA needs matrices with equal row counts, got {tuple(x.shape)} and {tuple(y.shape)}")
    if x.shape[0] < 2:
        raise UndefinedSimilarityError("CKA needs at least two samples")
    xc = x - x.mean(dim=0, keepdim=True)
    yc = y - y.mean(dim=0, keepdim=True)
    norm_x = torch.linalg.matrix_norm(xc.T @ xc)
    norm_y = torch.linalg.matrix_norm(yc.T @ yc)
    if norm_x == 0 or norm_y == 0:
        raise UndefinedSimilarityError("CKA is undefined for zero-variance input")
    return float(torch.linalg.matrix_norm(yc.T @ xc) ** 2 / (norm_x * norm_y))


def _pooled_rows(feature: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B * 16, C): each pooled cell is one sample."""
    pooled = F.adaptive_avg_pool2d(feature, POOL_SIZE)
    return pooled.permute(0, 2, 3, 1).reshape(-1, feature.shape[1])


@torch.no_grad()
def collect_boundary_features(
    model: DetectorModel,
    dataset,
    max_samples: int = DEFAULT_MAX_SAMPLES,
    batches: int = DEFAULT_BATCHES,
    batch_size: int = 8,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Essential and full boundary features of every adaptable stage.

    Runs the super-net with both boundaries captured; whole batches are
    consumed until ``max_samples`` rows are reached or ``batches`` run out.

    Returns:
        stage id -> (essential rows, full rows), each (N, C) float64
    """
    was_training = model.training
    model.eval()
    config = DepthConfiguration.super_net(model.arch)
    rows: dict[str, tuple[list[torch.Tensor], list[torch.Tensor]]] = {}
    consumed = 0
    count = 0
    for images, _ in scene_loader(dataset, batch_size):
        if count >= max_samples or consumed >= batches:
            break
        outputs = model(images, config, CaptureMode.BOTH)
        for stage_id, pair in outputs.boundary_features.items():
            ess, full = rows.setdefault(stage_id, ([], []))
            ess.append(_pooled_rows(pair.essential).double())
            full.append(_pooled_rows(pair.full).double())
        count += images.shape[0] * POOL_SIZE * POOL_SIZE
        consumed += 1
    model.train(was_training)
    logger.debug("Collected %d rows per stage from %d batches", count, consumed)
    return {k: (torch.cat(e).numpy(), torch.cat(f).numpy()) for k, (e, f) in rows.items()}


@dataclass
class CkaEntry:
    cka: float
    ci_low: float
    ci_high: float
    n_samples: int


@dataclass
class CkaReport:
    """Per-stage CKA between essential and full boundary features."""

    entries: dict[str, CkaEntry] = field(default_factory=dict)

    def __getitem__(self, stage_id: str) -> CkaEntry:
        return self.entries[stage_id]

    def group_mean(self, arch: ArchSpec, group: str) -> float:
        """Mean CKA over the stages of one group ('backbone' or 'neck')."""
        values = [e.cka for sid, e in self.entries.items() if arch.group_of(sid) == group]
        return float(np.mean(values)) if values else float("nan")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"stage": sid, "cka": e.cka, "ci_low": e.ci_low, "ci_high": e.ci_high, "n": e.n_samples}
                for sid, e in self.entries.items()
            ],
            columns=["stage", "cka", "ci_low", "ci_high", "n"],
        )


def bootstrap_cka(
    x: np.ndarray, y: np.ndarray, n_resamples: int = DEFAULT_BOOTSTRAP, confidence: float = 0.95, seed: int = 0
) -> CkaEntry:
    """CKA with a percentile bootstrap interval over i.i.d. row resamples.

    The interval is widened if needed so that it contains the point estimate.
    """
    value = linear_cka(x, y)
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        try:
            samples.append(linear_cka(x[idx], y[idx]))
        except UndefinedSimilarityError:
            continue
    if not samples:
        return CkaEntry(value, value, value, n)
    tail = (1.0 - confidence) / 2 * 100
    low, high = np.percentile(samples, [tail, 100 - tail])
    return CkaEntry(value, float(min(low, value)), float(max(high, value)), n)


def cka_report(
    model: DetectorModel,
    dataset,
    bootstrap_n: int = DEFAULT_BOOTSTRAP,
    max_samples: int = DEFAULT_MAX_SAMPLES,
    batches: int = DEFAULT_BATCHES,
    batch_size: int = 8,
    seed: int = 0,
) -> CkaReport:
    """Boundary CKA per adaptable stage with bootstrap confidence intervals."""
    features = collect_boundary_features(model, dataset, max_samples, batches, batch_size)
    report = CkaReport()
    for stage_id, (ess, full) in features.items():
        report.entries[stage_id] = bootstrap_cka(ess, full, bootstrap_n, seed=seed)
        logger.info("CKA %s = %.4f (n=%d)", stage_id, report.entries[stage_id].cka, ess.shape[0])
    return report


# ---------------------------------------------------------------------------
# Depth sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    config: DepthConfiguration
    bitstring: str
    decoder_exit: int | None
    flops: int
    report: APReport
    pareto: bool = False


def pareto_mask(costs: Sequence[float], scores: Sequence[float]) -> list[bool]:
    """True for points no other point beats on cost and score at once.

    A point is dominated when another has cost <= and score >= with at
    least one strict inequality.
    """
    costs, scores = np.asarray(costs, dtype=np.float64), np.asarray(scores, dtype=np.float64)
    mask = []
    for c, s in zip(costs, scores):
        dominated = ((costs <= c) & (scores >= s) & ((costs < c) | (scores > s))).any()
        mask.append(not bool(dominated))
    return mask


@dataclass
class SweepResult:
    rows: list[SweepRow]
    metric: str = "ap50"

    @property
    def front(self) -> list[SweepRow]:
        return sorted((r for r in self.rows if r.pareto), key=lambda r: r.flops)

    def row_for(self, config: DepthConfiguration) -> SweepRow:
        for row in self.rows:
            if row.config == config:
                return row
        raise KeyError(f"No sweep row for configuration {config}")

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = {
                "config": row.bitstring,
                "decoder_exit": row.decoder_exit if row.decoder_exit is not None else pd.NA,
                "flops": row.flops,
            }
            record.update(row.report.to_dict())
            record["pareto"] = row.pareto
            records.append(record)
        frame = pd.DataFrame(records)
        if "decoder_exit" in frame:
            frame["decoder_exit"] = frame["decoder_exit"].astype("Int64")
        return frame


def depth_sweep(
    model: DetectorModel,
    dataset,
    configs: Iterable[DepthConfiguration] | None = None,
    metric: str = "ap50",
    batch_size: int = 16,
) -> SweepResult:
    """Evaluate every configuration and mark the accuracy/FLOPs Pareto front.

    Args:
        model: Trained detector
        dataset: Evaluation scenes (or SceneDataset / DataLoader)
        configs: Configurations to evaluate; defaults to the full enumeration
        metric: APReport field ranked on the front
        batch_size: Evaluation batch size
    """
    arch = model.arch
    configs = list(configs) if configs is not None else enumerate_configs(arch)
    images, _ = next(iter(scene_loader(dataset, 1)))
    input_hw = tuple(images.shape[-2:])
    rows = []
    for i, config in enumerate(configs):
        report = evaluate_map(*collect_predictions(model, dataset, config, batch_size), num_classes=arch.num_classes)
        rows.append(
            SweepRow(config, config.bitstring(arch), config.decoder_exit, flops_estimate(arch, config, input_hw), report)
        )
        logger.debug("sweep %d/%d %s: %s=%.4f", i + 1, len(configs), config.label(arch), metric, getattr(report, metric))
    mask = pareto_mask([r.flops for r in rows], [getattr(r.report, metric) for r in rows])
    for row, on_front in zip(rows, mask):
        row.pareto = on_front
    logger.info("Swept %d configurations, %d on the Pareto front", len(rows), sum(mask))
    return SweepResult(rows, metric)


def plot_pareto(
    frame: pd.DataFrame | SweepResult, path: str | os.PathLike, metric: str = "ap50", title: str | None = None
) -> Path:
    """Scatter accuracy against FLOPs with the Pareto front drawn as a line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(frame, SweepResult):
        metric = frame.metric
        frame = frame.to_frame()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gflops = frame["flops"] / 1e9
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(gflops, frame[metric], s=10, alpha=0.5, label="configurations")
    front = frame[frame["pareto"].astype(bool)].sort_values("flops")
    ax.plot(front["flops"] / 1e9, front[metric], "o-", color="tab:red", label="Pareto front")
    ax.set_xlabel("GMACs per image")
    ax.set_ylabel(metric)
    ax.set_title(title or f"{metric} vs compute")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Paired AP/AR breakdown
# ---------------------------------------------------------------------------


@dataclass
class PrBreakdown:
    super_report: APReport
    base_report: APReport

    @property
    def deltas(self) -> dict[str, float]:
        """super minus base per metric."""
        s, b = self.super_report.to_dict(), self.base_report.to_dict()
        return {k: s[k] - b[k] for k in s}

    def to_frame(self) -> pd.DataFrame:
        s, b = self.super_report.to_dict(), self.base_report.to_dict()
        frame = pd.DataFrame({"metric": list(s), "super": list(s.values()), "base": [b[k] for k in s]})
        frame["delta"] = frame["super"] - frame["base"]
        return frame


def pr_breakdown(
    predictions_super: Sequence, predictions_base: Sequence, ground_truth: Sequence, num_classes: int = 3
) -> PrBreakdown:
    """AP and AR by IoU and size tier for two prediction sets on the same split."""
    return PrBreakdown(
        evaluate_map(predictions_super, ground_truth, num_classes=num_classes),
        evaluate_map(predictions_base, ground_truth, num_classes=num_classes),
    )


def mean_group_cka(report: CkaReport, arch: ArchSpec) -> Mapping[str, float]:
    return {group: report.group_mean(arch, group) for group in (BACKBONE, NECK)}
