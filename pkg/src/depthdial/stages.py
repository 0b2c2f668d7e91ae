"""
Adaptive stage primitives.

A stage runs blocks ``1..m`` (essential path) and, in full mode, blocks
``m+1..S`` (refinement path). Essential-path blocks normalise through a
:class:`SwitchableBatchNorm2d` whose branch follows the stage's execution
mode; refinement blocks have a single normaliser whose scale starts at zero,
so a freshly built stage returns the same tensor in both modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ExecutionMode, StageKind, StageSpec
from .errors import InvalidSpecError
from .registry import ComponentRegistry

__all__ = [
    "ExecutionMode",
    "StageOutput",
    "CspAggregators",
    "SwitchableBatchNorm2d",
    "bn_branch",
    "ConvNormAct",
    "ResidualBlock",
    "CspBlock",
    "ResidualStage",
    "CspStage",
    "create_stage_registry",
]


@dataclass
class StageOutput:
    """Stage result plus the boundary features captured on request."""

    output: Tensor
    boundary_essential: Tensor | None = None
    boundary_full: Tensor | None = None


def batch_stats_norm(x: Tensor, bn: nn.BatchNorm2d) -> Tensor:
    """Normalise with batch statistics, leaving running_mean / running_var alone."""
    return F.batch_norm(x, None, None, bn.weight, bn.bias, True, 0.0, bn.eps)


class SwitchableBatchNorm2d(nn.Module):
    """Batch norm with one independent branch per execution mode.

    With ``switchable=False`` a single branch serves both modes, which is
    the non-switchable twin used for the naive joint-training baseline.
    """

    def __init__(self, num_features: int, switchable: bool = True):
        super().__init__()
        self.switchable = switchable
        count = 2 if switchable else 1
        self.branches = nn.ModuleList(nn.BatchNorm2d(num_features) for _ in range(count))

    def branch(self, mode: ExecutionMode) -> nn.BatchNorm2d:
        """Normaliser used when the enclosing stage runs in ``mode``."""
        if not self.switchable:
            return self.branches[0]
        return self.branches[1 if mode is ExecutionMode.FULL else 0]

    def forward(self, x: Tensor, mode: ExecutionMode, update_stats: bool = True) -> Tensor:
        bn = self.branch(mode)
        if update_stats or not self.training:
            return bn(x)
        return batch_stats_norm(x, bn)


def bn_branch(norm: nn.Module, mode: ExecutionMode) -> nn.BatchNorm2d:
    """Resolve the normaliser a block uses in ``mode``.

    Refinement-path blocks hold a plain ``BatchNorm2d`` and always return it.
    """
    if isinstance(norm, SwitchableBatchNorm2d):
        return norm.branch(mode)
    return norm


class ConvNormAct(nn.Module):
    """Conv2d -> (switchable) BatchNorm -> SiLU."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int = 1,
        stride: int = 1,
        switchable: bool = False,
        act: bool = True,
    ):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride, kernel // 2, bias=False)
        self.norm = SwitchableBatchNorm2d(c_out, switchable) if switchable else nn.BatchNorm2d(c_out)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x: Tensor, mode: ExecutionMode = ExecutionMode.FULL, update_stats: bool = True) -> Tensor:
        y = self.conv(x)
        if isinstance(self.norm, SwitchableBatchNorm2d):
            y = self.norm(y, mode, update_stats)
        elif update_stats or not self.training:
            y = self.norm(y)
        else:
            y = batch_stats_norm(y, self.norm)
        return self.act(y)

    def zero_init_norm(self) -> None:
        for bn in self.norm.modules():
            if isinstance(bn, nn.BatchNorm2d):
                nn.init.zeros_(bn.weight)


class ResidualBlock(nn.Module):
    """x + f(x) with f a 1x1 -> 3x3 -> 1x1 bottleneck."""

    def __init__(self, channels: int, hidden: int, switchable: bool = False, refinement: bool = False):
        super().__init__()
        self.cv1 = ConvNormAct(channels, hidden, 1, switchable=switchable)
        self.cv2 = ConvNormAct(hidden, hidden, 3, switchable=switchable)
        self.cv3 = ConvNormAct(hidden, channels, 1, switchable=switchable, act=False)
        if refinement:
            self.cv3.zero_init_norm()

    def residual(self, x: Tensor, mode: ExecutionMode) -> Tensor:
        return self.cv3(self.cv2(self.cv1(x, mode), mode), mode)

    def forward(self, x: Tensor, mode: ExecutionMode = ExecutionMode.FULL) -> Tensor:
        return x + self.residual(x, mode)


class CspBlock(nn.Module):
    """Two 3x3 conv units of width c' without shortcut."""

    def __init__(self, hidden: int, switchable: bool = False, refinement: bool = False):
        super().__init__()
        self.cv1 = ConvNormAct(hidden, hidden, 3, switchable=switchable)
        self.cv2 = ConvNormAct(hidden, hidden, 3, switchable=switchable)
        if refinement:
            self.cv2.zero_init_norm()

    def forward(self, x: Tensor, mode: ExecutionMode = ExecutionMode.FULL) -> Tensor:
        return self.cv2(self.cv1(x, mode), mode)


class _AdaptiveStage(nn.Module):
    """Shared bookkeeping for both stage kinds."""

    def __init__(self, spec: StageSpec, switchable_bn: bool):
        super().__init__()
        self.spec = spec
        self.switchable = switchable_bn and spec.adaptable

    @property
    def split(self) -> int:
        return self.spec.split

    def _effective_mode(self, mode: ExecutionMode) -> ExecutionMode:
        return ExecutionMode(mode) if self.spec.adaptable else ExecutionMode.FULL

    def _is_refinement(self, index: int) -> bool:
        return self.spec.adaptable and index >= self.spec.split

    def _check_input(self, x: Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"Stage {self.spec.stage_id} expects (B, {self.spec.in_channels}, H, W), "
                f"got {tuple(x.shape)}"
            )

    def run_blocks(self, x: Tensor, start: int, stop: int, mode: ExecutionMode) -> Tensor:
        """Apply blocks ``start..stop-1`` (0-based) to ``x``."""
        for block in self.blocks[start:stop]:
            x = block(x, mode)
        return x


class ResidualStage(_AdaptiveStage):
    """Stage of additive residual blocks: x_full = x_ess + Delta(x_ess)."""

    def __init__(self, spec: StageSpec, *, switchable_bn: bool = True, switchable_aggregator: bool = True):
        if spec.kind is not StageKind.RESIDUAL:
            raise InvalidSpecError(f"{spec.stage_id}: ResidualStage needs kind 'residual', got '{spec.kind.value}'")
        super().__init__(spec, switchable_bn)
        self.proj = (
            ConvNormAct(spec.in_channels, spec.out_channels, 1, switchable=self.switchable, act=False)
            if spec.in_channels != spec.out_channels
            else None
        )
        self.blocks = nn.ModuleList(
            ResidualBlock(
                spec.out_channels,
                spec.hidden,
                switchable=self.switchable and not self._is_refinement(i),
                refinement=self._is_refinement(i),
            )
            for i in range(spec.block_count)
        )

    def stem(self, x: Tensor, mode: ExecutionMode) -> Tensor:
        """x^(0): the stage input, projected when the width changes."""
        return x if self.proj is None else self.proj(x, mode)

    def refine(self, x_ess: Tensor) -> Tensor:
        """Refinement blocks m+1..S applied to an essential boundary."""
        return self.run_blocks(x_ess, self.split, self.spec.block_count, ExecutionMode.FULL)

    def forward(
        self,
        x: Tensor,
        mode: ExecutionMode = ExecutionMode.FULL,
        capture: bool = False,
        essential_in_full: bool = True,
    ) -> StageOutput:
        """Run the essential path, then the refinement path in full mode.

        Args:
            x: Input (B, C_in, H, W)
            mode: Execution mode; non-adaptable stages always run full
            capture: Record boundary features
            essential_in_full: With ``capture`` in full mode, also record x^(m)

        Raises:
            ValueError: If the channel count of ``x`` does not match the spec
        """
        self._check_input(x)
        mode = self._effective_mode(mode)
        x_ess = self.run_blocks(self.stem(x, mode), 0, self.split, mode)
        if mode is ExecutionMode.ESSENTIAL:
            return StageOutput(x_ess, boundary_essential=x_ess if capture else None)
        x_full = self.run_blocks(x_ess, self.split, self.spec.block_count, mode)
        if not capture or not self.spec.adaptable:
            return StageOutput(x_full)
        return StageOutput(
            x_full,
            boundary_essential=x_ess if essential_in_full else None,
            boundary_full=x_full,
        )


@dataclass
class CspAggregators:
    """Full-path aggregator weight and the optional dedicated essential one.

    ``w_cv2`` has shape (C_out, (S+1)c', 1, 1); ``w_cv2_ess`` (C_out, (m+1)c', 1, 1).
    """

    w_cv2: Tensor
    w_cv2_ess: Tensor | None = None

    def check(self, spec: StageSpec, dedicated: bool) -> "CspAggregators":
        """Validate shapes against a stage spec.

        Raises:
            InvalidSpecError: If a weight does not fit S, m, c' and C_out, or the
                dedicated weight is present/absent against ``dedicated``
        """
        c_out, cp = spec.out_channels, spec.hidden
        expected = (c_out, (spec.block_count + 1) * cp, 1, 1)
        if tuple(self.w_cv2.shape) != expected:
            raise InvalidSpecError(
                f"{spec.stage_id}: W_cv2 shape {tuple(self.w_cv2.shape)} != {expected}"
            )
        if dedicated != (self.w_cv2_ess is not None):
            raise InvalidSpecError(
                f"{spec.stage_id}: essential aggregator {'missing' if dedicated else 'unexpected'}"
            )
        if self.w_cv2_ess is not None:
            expected_ess = (c_out, (spec.split + 1) * cp, 1, 1)
            if tuple(self.w_cv2_ess.shape) != expected_ess:
                raise InvalidSpecError(
                    f"{spec.stage_id}: W_cv2_ess shape {tuple(self.w_cv2_ess.shape)} != {expected_ess}"
                )
        return self


class CspStage(_AdaptiveStage):
    """CSP stage: concat [x^(0)..x^(n)] then a 1x1 aggregation.

    The essential path aggregates [x^(0)..x^(m)] with a dedicated
    ``cv2_ess`` when the stage has S >= 4 blocks (and the architecture
    enables switchable aggregators); otherwise with the first (m+1)c'
    input columns of the full aggregator.
    """

    def __init__(self, spec: StageSpec, *, switchable_bn: bool = True, switchable_aggregator: bool = True):
        if spec.kind is not StageKind.CSP:
            raise InvalidSpecError(f"{spec.stage_id}: CspStage needs kind 'csp', got '{spec.kind.value}'")
        super().__init__(spec, switchable_bn)
        cp = spec.hidden
        self.cv1 = ConvNormAct(spec.in_channels, cp, 1, switchable=self.switchable)
        self.blocks = nn.ModuleList(
            CspBlock(cp, switchable=self.switchable and not self._is_refinement(i), refinement=self._is_refinement(i))
            for i in range(spec.block_count)
        )
        dedicated = switchable_aggregator and spec.has_switchable_aggregator
        # the full aggregator needs an essential BN branch only when it is sliced
        self.cv2 = ConvNormAct(
            (spec.block_count + 1) * cp, spec.out_channels, 1, switchable=self.switchable and not dedicated
        )
        self.cv2_ess = None
        if dedicated:
            self.cv2_ess = ConvNormAct((spec.split + 1) * cp, spec.out_channels, 1)
            with torch.no_grad():
                self.cv2_ess.conv.weight.copy_(self._sliced_weight())

    @property
    def essential_width(self) -> int:
        return (self.split + 1) * self.spec.hidden

    def _sliced_weight(self) -> Tensor:
        return self.cv2.conv.weight[:, : self.essential_width]

    @property
    def aggregators(self) -> CspAggregators:
        return CspAggregators(
            self.cv2.conv.weight,
            None if self.cv2_ess is None else self.cv2_ess.conv.weight,
        )

    def set_aggregators(self, aggs: CspAggregators) -> "CspStage":
        """Load aggregator weights after validating their shapes.

        Returns:
            self for method chaining
        """
        aggs.check(self.spec, dedicated=self.cv2_ess is not None)
        with torch.no_grad():
            self.cv2.conv.weight.copy_(aggs.w_cv2)
            if self.cv2_ess is not None:
                self.cv2_ess.conv.weight.copy_(aggs.w_cv2_ess)
        return self

    def aggregate_essential(self, prefix: Tensor, update_stats: bool = True) -> Tensor:
        """Aggregate the concatenated essential prefix [x^(0)..x^(m)]."""
        if prefix.shape[1] != self.essential_width:
            raise InvalidSpecError(
                f"{self.spec.stage_id}: essential prefix has {prefix.shape[1]} channels, "
                f"expected {self.essential_width}"
            )
        if self.cv2_ess is not None:
            return self.cv2_ess(prefix, ExecutionMode.ESSENTIAL, update_stats)
        y = F.conv2d(prefix, self._sliced_weight())
        norm = self.cv2.norm
        if isinstance(norm, SwitchableBatchNorm2d):
            y = norm(y, ExecutionMode.ESSENTIAL, update_stats)
        elif update_stats or not self.training:
            y = norm(y)
        else:
            y = batch_stats_norm(y, norm)
        return self.cv2.act(y)

    def forward(
        self,
        x: Tensor,
        mode: ExecutionMode = ExecutionMode.FULL,
        capture: bool = False,
        essential_in_full: bool = True,
    ) -> StageOutput:
        """Run the block chain and aggregate per mode.

        With ``capture`` in full mode the essential boundary is the essential
        aggregator applied to the already computed prefix; its normaliser
        uses batch statistics without updating running statistics.
        """
        self._check_input(x)
        mode = self._effective_mode(mode)
        ys = [self.cv1(x, mode)]
        for block in self.blocks[: self.spec.blocks_for(mode)]:
            ys.append(block(ys[-1], mode))

        if mode is ExecutionMode.ESSENTIAL:
            out = self.aggregate_essential(torch.cat(ys, 1))
            return StageOutput(out, boundary_essential=out if capture else None)

        out = self.cv2(torch.cat(ys, 1), mode)
        if not capture or not self.spec.adaptable:
            return StageOutput(out)
        x_ess = None
        if essential_in_full:
            x_ess = self.aggregate_essential(torch.cat(ys[: self.split + 1], 1), update_stats=False)
        return StageOutput(out, boundary_essential=x_ess, boundary_full=out)


def create_stage_registry() -> ComponentRegistry:
    """Registry with both stage primitives registered by kind."""
    registry = ComponentRegistry("stage")
    registry.register(StageKind.RESIDUAL.value, ResidualStage, "Additive residual blocks (Bottleneck, RepVgg-style)")
    registry.register(StageKind.CSP.value, CspStage, "Concatenate-and-aggregate CSP blocks (C3k2, A2C2f-style)")
    return registry
