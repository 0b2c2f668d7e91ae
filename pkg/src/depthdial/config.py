"""
Architecture and depth-configuration descriptors.

An :class:`ArchSpec` describes a backbone--neck--head detector whose
backbone and neck stages are split into an essential prefix (blocks
``1..m``) and a skippable refinement suffix (blocks ``m+1..S``). A
:class:`DepthConfiguration` picks, per adaptable stage, which of the two
paths runs, plus the decoder exit for set-prediction heads. Every function
here is pure.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, NamedTuple

from .errors import InvalidConfigError, InvalidSpecError

_GRAMMAR_PATTERN = re.compile(r"^\s*(essential|full)\s*:\s*(.+?)\s*$", re.IGNORECASE)
_TOKEN_PATTERN = re.compile(r"^[A-Za-z0-9_\-]+$")
_BITS_PATTERN = re.compile(r"^[01]+$")

BACKBONE = "backbone"
NECK = "neck"


class ExecutionMode(str, Enum):
    """Which path of a stage runs; also selects the BN branch."""

    ESSENTIAL = "essential"
    FULL = "full"

    @property
    def bit(self) -> str:
        return "1" if self is ExecutionMode.FULL else "0"


class StageKind(str, Enum):
    RESIDUAL = "residual"
    CSP = "csp"


class HeadKind(str, Enum):
    SET_PREDICTION = "set_prediction"
    DENSE = "dense"


def _check_keys(data: Mapping[str, Any], allowed: Iterable[str], where: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise InvalidSpecError(f"Unknown key(s) in {where}: {', '.join(unknown)}")


def _is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


def split_point(block_count: int, override: int | None = None) -> int | None:
    """Number of essential-path blocks for a stage of ``block_count`` blocks.

    Args:
        block_count: Total blocks S in the stage
        override: Explicit split point, must satisfy 1 <= override < S

    Returns:
        ``override`` when given, else ceil(S / 2). ``None`` for S = 1, which
        marks the stage non-adaptable.

    Raises:
        InvalidSpecError: If S < 1 or the override lies outside [1, S - 1]

    Example:
        >>> split_point(6)
        3
        >>> split_point(3, override=1)
        1
    """
    if block_count < 1:
        raise InvalidSpecError(f"block_count must be positive, got {block_count}")
    if block_count == 1:
        if override is not None:
            raise InvalidSpecError("A single-block stage is non-adaptable and takes no split point")
        return None
    if override is not None:
        if not 1 <= override < block_count:
            raise InvalidSpecError(
                f"split point override {override} outside [1, {block_count - 1}]"
            )
        return override
    return math.ceil(block_count / 2)


@dataclass(frozen=True)
class StageSpec:
    """One adaptive stage: S blocks split at m, at a fixed spatial stride.

    ``hidden`` is the per-block width c' (bottleneck width for residual
    stages, block width for CSP stages). ``split`` is the override passed to
    :func:`split_point`; after construction it always holds the resolved m.
    """

    stage_id: str
    kind: StageKind
    block_count: int
    in_channels: int
    out_channels: int
    hidden: int
    spatial_scale: int
    split: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", StageKind(self.kind))
        for name in ("block_count", "in_channels", "out_channels", "hidden"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidSpecError(f"{self.stage_id}: {name} must be a positive integer, got {value!r}")
        if not _is_power_of_two(self.spatial_scale) or self.spatial_scale < 2:
            raise InvalidSpecError(
                f"{self.stage_id}: spatial_scale must be a power of two >= 2, got {self.spatial_scale}"
            )
        m = split_point(self.block_count, self.split)
        object.__setattr__(self, "split", self.block_count if m is None else m)

    @property
    def adaptable(self) -> bool:
        """Stages with a single block always run full."""
        return self.block_count >= 2

    @property
    def has_switchable_aggregator(self) -> bool:
        return self.kind is StageKind.CSP and self.block_count >= 4

    def blocks_for(self, mode: ExecutionMode) -> int:
        """Blocks executed in ``mode``."""
        if mode is ExecutionMode.ESSENTIAL and self.adaptable:
            return self.split
        return self.block_count

    def to_dict(self) -> dict:
        return {
            "stage_id": self.stage_id,
            "kind": self.kind.value,
            "block_count": self.block_count,
            "split": self.split if self.adaptable else None,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "hidden": self.hidden,
            "spatial_scale": self.spatial_scale,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StageSpec":
        _check_keys(data, _STAGE_KEYS, f"stage '{data.get('stage_id', '?')}'")
        try:
            return cls(**data)
        except TypeError as e:
            raise InvalidSpecError(f"Incomplete stage description: {e}") from e


_STAGE_KEYS = (
    "stage_id", "kind", "block_count", "split", "in_channels",
    "out_channels", "hidden", "spatial_scale",
)


class NeckLink(NamedTuple):
    """How a neck stage is fed: the previous output resampled, plus a lateral."""

    stage_id: str
    source_scale: int
    source_channels: int
    lateral_scale: int
    lateral_channels: int


@dataclass(frozen=True)
class ArchSpec:
    """A backbone (P2..P5), an FPN-then-PAN neck, and one detection head.

    Neck stages are processed in order; each fuses the previous neck output
    (or the deepest backbone output for the first one), resampled to the
    stage's scale, with the latest feature map at that scale.
    """

    backbone_stages: tuple[StageSpec, ...]
    neck_stages: tuple[StageSpec, ...]
    head_kind: HeadKind
    num_classes: int = 3
    decoder_layers: int = 3
    num_queries: int = 20
    hidden_dim: int = 64
    ffn_dim: int = 128
    num_heads: int = 4
    reg_bins: int = 8
    stem_channels: int = 16
    switchable_bn: bool = True
    switchable_aggregator: bool = True

    def __post_init__(self):
        object.__setattr__(self, "backbone_stages", tuple(self.backbone_stages))
        object.__setattr__(self, "neck_stages", tuple(self.neck_stages))
        object.__setattr__(self, "head_kind", HeadKind(self.head_kind))
        self._validate()

    def _validate(self) -> None:
        if not self.backbone_stages:
            raise InvalidSpecError("ArchSpec needs at least one backbone stage")
        ids = [s.stage_id for s in self.stages]
        if len(set(ids)) != len(ids):
            raise InvalidSpecError(f"Duplicate stage ids: {ids}")
        scales = [s.spatial_scale for s in self.backbone_stages]
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise InvalidSpecError(f"Backbone spatial scales must strictly increase, got {scales}")
        for name in ("num_classes", "hidden_dim", "ffn_dim", "num_heads", "reg_bins", "stem_channels"):
            if getattr(self, name) < 1:
                raise InvalidSpecError(f"{name} must be positive")
        if self.head_kind is HeadKind.SET_PREDICTION:
            if self.decoder_layers < 1 or self.num_queries < 1:
                raise InvalidSpecError("set_prediction head needs decoder_layers >= 1 and num_queries >= 1")
            if self.hidden_dim % self.num_heads:
                raise InvalidSpecError("hidden_dim must be divisible by num_heads")
        if self.reg_bins < 2:
            raise InvalidSpecError("reg_bins must be at least 2")
        # neck_links() validates scales and channel widths
        self.neck_links()

    @property
    def stages(self) -> tuple[StageSpec, ...]:
        return self.backbone_stages + self.neck_stages

    @property
    def adaptable_stages(self) -> tuple[StageSpec, ...]:
        return tuple(s for s in self.stages if s.adaptable)

    @property
    def max_stride(self) -> int:
        return max(s.spatial_scale for s in self.stages)

    def stage(self, stage_id: str) -> StageSpec:
        for s in self.stages:
            if s.stage_id == stage_id:
                return s
        raise KeyError(f"Stage '{stage_id}' not in architecture")

    def group_of(self, stage_id: str) -> str:
        """'backbone' or 'neck'."""
        if any(s.stage_id == stage_id for s in self.backbone_stages):
            return BACKBONE
        if any(s.stage_id == stage_id for s in self.neck_stages):
            return NECK
        raise KeyError(f"Stage '{stage_id}' not in architecture")

    def neck_links(self) -> list[NeckLink]:
        """Resolve which tensors feed each neck stage.

        Raises:
            InvalidSpecError: If a neck stage references a scale the backbone
                does not produce, or its in_channels do not equal the fused width
        """
        channels = {s.spatial_scale: s.out_channels for s in self.backbone_stages}
        last = self.backbone_stages[-1]
        prev_scale, prev_ch = last.spatial_scale, last.out_channels
        links = []
        for stage in self.neck_stages:
            if stage.spatial_scale not in channels:
                raise InvalidSpecError(
                    f"Neck stage {stage.stage_id} references scale {stage.spatial_scale}, "
                    f"backbone provides {sorted(channels)}"
                )
            lateral = channels[stage.spatial_scale]
            if stage.in_channels != prev_ch + lateral:
                raise InvalidSpecError(
                    f"Neck stage {stage.stage_id}: in_channels {stage.in_channels} != "
                    f"{prev_ch} (resampled) + {lateral} (lateral)"
                )
            links.append(NeckLink(stage.stage_id, prev_scale, prev_ch, stage.spatial_scale, lateral))
            channels[stage.spatial_scale] = stage.out_channels
            prev_scale, prev_ch = stage.spatial_scale, stage.out_channels
        return links

    def head_inputs(self) -> list[tuple[int, int]]:
        """(scale, channels) of the feature maps the head consumes, finest first."""
        channels = {s.spatial_scale: s.out_channels for s in self.backbone_stages}
        if not self.neck_stages:
            return sorted(channels.items())[-3:]
        for stage in self.neck_stages:
            channels[stage.spatial_scale] = stage.out_channels
        scales = sorted({s.spatial_scale for s in self.neck_stages})
        return [(s, channels[s]) for s in scales]

    def without_switchable(self) -> "ArchSpec":
        """The non-switchable twin: single BN and sliced aggregators everywhere."""
        return ArchSpec.from_dict({**self.to_dict(), "switchable_bn": False, "switchable_aggregator": False})

    def to_dict(self) -> dict:
        return {
            "backbone_stages": [s.to_dict() for s in self.backbone_stages],
            "neck_stages": [s.to_dict() for s in self.neck_stages],
            "head_kind": self.head_kind.value,
            "num_classes": self.num_classes,
            "decoder_layers": self.decoder_layers,
            "num_queries": self.num_queries,
            "hidden_dim": self.hidden_dim,
            "ffn_dim": self.ffn_dim,
            "num_heads": self.num_heads,
            "reg_bins": self.reg_bins,
            "stem_channels": self.stem_channels,
            "switchable_bn": self.switchable_bn,
            "switchable_aggregator": self.switchable_aggregator,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ArchSpec":
        _check_keys(data, _ARCH_KEYS, "arch")
        data = dict(data)
        try:
            data["backbone_stages"] = tuple(StageSpec.from_dict(s) for s in data["backbone_stages"])
            data["neck_stages"] = tuple(StageSpec.from_dict(s) for s in data.get("neck_stages", ()))
            return cls(**data)
        except (KeyError, TypeError) as e:
            raise InvalidSpecError(f"Incomplete arch description: {e}") from e

    def spec_hash(self) -> str:
        """Stable short hash of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_ARCH_KEYS = (
    "backbone_stages", "neck_stages", "head_kind", "num_classes", "decoder_layers",
    "num_queries", "hidden_dim", "ffn_dim", "num_heads", "reg_bins", "stem_channels",
    "switchable_bn", "switchable_aggregator",
)


@dataclass(frozen=True)
class DepthConfiguration:
    """Per-stage path choice plus the decoder exit (set-prediction only)."""

    stage_modes: Mapping[str, ExecutionMode] = field(default_factory=dict)
    decoder_exit: int | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "stage_modes", {k: ExecutionMode(v) for k, v in self.stage_modes.items()}
        )

    def __hash__(self) -> int:
        return hash((tuple(sorted(self.stage_modes.items())), self.decoder_exit))

    def mode_of(self, stage_id: str) -> ExecutionMode:
        """Mode of a stage; stages absent from the map run full."""
        return self.stage_modes.get(stage_id, ExecutionMode.FULL)

    def bitstring(self, arch: ArchSpec) -> str:
        """One character per adaptable stage in arch order: 0 essential, 1 full."""
        return "".join(self.mode_of(s.stage_id).bit for s in arch.adaptable_stages)

    def label(self, arch: ArchSpec) -> str:
        exit_part = "" if self.decoder_exit is None else f"@{self.decoder_exit}"
        return self.bitstring(arch) + exit_part

    @classmethod
    def uniform(cls, arch: ArchSpec, mode: ExecutionMode, decoder_exit: int | None = None) -> "DepthConfiguration":
        """Every adaptable stage in ``mode``; default exit is the last layer."""
        if arch.head_kind is HeadKind.SET_PREDICTION and decoder_exit is None:
            decoder_exit = arch.decoder_layers
        if arch.head_kind is HeadKind.DENSE:
            decoder_exit = None
        return cls({s.stage_id: ExecutionMode(mode) for s in arch.adaptable_stages}, decoder_exit)

    @classmethod
    def super_net(cls, arch: ArchSpec) -> "DepthConfiguration":
        return cls.uniform(arch, ExecutionMode.FULL)

    @classmethod
    def base_net(cls, arch: ArchSpec, decoder_exit: int | None = None) -> "DepthConfiguration":
        return cls.uniform(arch, ExecutionMode.ESSENTIAL, decoder_exit)

    def to_dict(self) -> dict:
        return {
            "stage_modes": {k: v.value for k, v in self.stage_modes.items()},
            "decoder_exit": self.decoder_exit,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DepthConfiguration":
        _check_keys(data, ("stage_modes", "decoder_exit"), "depth configuration")
        try:
            return cls(data.get("stage_modes", {}), data.get("decoder_exit"))
        except ValueError as e:
            raise InvalidConfigError(f"Bad depth configuration: {e}") from e


def validate_config(arch: ArchSpec, config: DepthConfiguration) -> DepthConfiguration:
    """Check a configuration against an architecture.

    Returns:
        ``config`` unchanged, for chaining

    Raises:
        InvalidConfigError: On unknown or missing stage ids, essential mode on
            a non-adaptable stage, or a decoder exit out of range
    """
    known = {s.stage_id: s for s in arch.stages}
    for stage_id, mode in config.stage_modes.items():
        if stage_id not in known:
            raise InvalidConfigError(f"Unknown stage id '{stage_id}'")
        if not known[stage_id].adaptable and mode is not ExecutionMode.FULL:
            raise InvalidConfigError(f"Stage '{stage_id}' is non-adaptable and must run full")
    missing = [s.stage_id for s in arch.adaptable_stages if s.stage_id not in config.stage_modes]
    if missing:
        raise InvalidConfigError(f"No mode given for adaptable stage(s): {', '.join(missing)}")
    if arch.head_kind is HeadKind.SET_PREDICTION:
        if config.decoder_exit is None or not 1 <= config.decoder_exit <= arch.decoder_layers:
            raise InvalidConfigError(
                f"decoder_exit {config.decoder_exit} outside [1, {arch.decoder_layers}]"
            )
    elif config.decoder_exit is not None:
        raise InvalidConfigError("decoder_exit applies to set_prediction heads only")
    return config


def enumerate_configs(
    arch: ArchSpec, decoder_exits: Iterable[int] | None = None
) -> list[DepthConfiguration]:
    """All 2^k x |exits| depth configurations in canonical order.

    Stages vary in architecture order (the first stage slowest), essential
    before full, with ascending exits innermost. The first entry is the
    base-net at the smallest requested exit, the last the super-net at the
    largest.

    Args:
        arch: Architecture to enumerate
        decoder_exits: Exits to combine with; defaults to 1..D for
            set-prediction heads and is ignored for dense heads
    """
    if arch.head_kind is HeadKind.DENSE:
        exits: list[int | None] = [None]
    else:
        exits = sorted(set(decoder_exits or range(1, arch.decoder_layers + 1)))
        for e in exits:
            if not 1 <= e <= arch.decoder_layers:
                raise InvalidConfigError(f"decoder exit {e} outside [1, {arch.decoder_layers}]")
    ids = [s.stage_id for s in arch.adaptable_stages]
    modes = (ExecutionMode.ESSENTIAL, ExecutionMode.FULL)
    return [
        DepthConfiguration(dict(zip(ids, combo)), exit_)
        for combo in itertools.product(modes, repeat=len(ids))
        for exit_ in exits
    ]


def parse_depth_config(text: str, arch: ArchSpec, decoder_exit: int | None = None) -> DepthConfiguration:
    """Parse the command-line depth grammar.

    ``essential:P2,P3`` runs the listed stages essential and the rest full;
    ``full:P4`` the reverse. ``all``, ``backbone`` and ``neck`` name groups.
    Stage ids match case-insensitively. A bitstring such as ``00111111``
    (one character per adaptable stage, 0 essential) is accepted as well.

    Example:
        >>> parse_depth_config("essential:all", arch, decoder_exit=1)

    Raises:
        InvalidConfigError: On malformed text or unknown stage ids
    """
    if arch.head_kind is HeadKind.SET_PREDICTION and decoder_exit is None:
        decoder_exit = arch.decoder_layers
    if arch.head_kind is HeadKind.DENSE:
        decoder_exit = None
    ids = [s.stage_id for s in arch.adaptable_stages]

    bits = text.strip()
    if _BITS_PATTERN.match(bits):
        if len(bits) != len(ids):
            raise InvalidConfigError(f"Bitstring '{bits}' has {len(bits)} characters, expected {len(ids)}")
        modes = {sid: ExecutionMode.FULL if b == "1" else ExecutionMode.ESSENTIAL for sid, b in zip(ids, bits)}
        return validate_config(arch, DepthConfiguration(modes, decoder_exit))

    match = _GRAMMAR_PATTERN.match(text)
    if not match:
        raise InvalidConfigError(
            f"Cannot parse depth config '{text}'; expected 'essential:<stages>' or 'full:<stages>'"
        )
    listed_mode = ExecutionMode(match.group(1).lower())
    other_mode = ExecutionMode.FULL if listed_mode is ExecutionMode.ESSENTIAL else ExecutionMode.ESSENTIAL
    by_name = {s.stage_id.lower(): s.stage_id for s in arch.adaptable_stages}

    selected: set[str] = set()
    for token in (t.strip() for t in match.group(2).split(",")):
        if not _TOKEN_PATTERN.match(token):
            raise InvalidConfigError(f"Malformed stage token '{token}' in '{text}'")
        key = token.lower()
        if key == "all":
            selected.update(by_name.values())
        elif key in (BACKBONE, NECK):
            selected.update(s.stage_id for s in arch.adaptable_stages if arch.group_of(s.stage_id) == key)
        elif key in by_name:
            selected.add(by_name[key])
        else:
            raise InvalidConfigError(
                f"Unknown stage '{token}'; adaptable stages are {', '.join(by_name.values())}"
            )

    config = DepthConfiguration(
        {sid: listed_mode if sid in selected else other_mode for sid in by_name.values()}, decoder_exit
    )
    return validate_config(arch, config)


# ---------------------------------------------------------------------------
# Analytic cost model (multiply-accumulates)
# ---------------------------------------------------------------------------


def conv_macs(kernel: int, c_in: int, c_out: int, h: int, w: int) -> int:
    """MACs of a dense convolution producing an ``h x w`` output."""
    return kernel * kernel * c_in * c_out * h * w


def linear_macs(rows: int, d_in: int, d_out: int) -> int:
    return rows * d_in * d_out


def stage_macs(spec: StageSpec, mode: ExecutionMode, h: int, w: int) -> int:
    """MACs of one stage at an ``h x w`` resolution."""
    blocks = spec.blocks_for(mode)
    c, cp = spec.out_channels, spec.hidden
    if spec.kind is StageKind.RESIDUAL:
        proj = conv_macs(1, spec.in_channels, c, h, w) if spec.in_channels != c else 0
        block = conv_macs(1, c, cp, h, w) + conv_macs(3, cp, cp, h, w) + conv_macs(1, cp, c, h, w)
        return proj + blocks * block
    entry = conv_macs(1, spec.in_channels, cp, h, w)
    block = 2 * conv_macs(3, cp, cp, h, w)
    aggregator = conv_macs(1, (blocks + 1) * cp, c, h, w)
    return entry + blocks * block + aggregator


def decoder_layer_macs(arch: ArchSpec, tokens: int) -> int:
    """One decoder layer: self-attention, cross-attention, FFN, both heads."""
    q, d, ff = arch.num_queries, arch.hidden_dim, arch.ffn_dim
    self_attn = 4 * linear_macs(q, d, d) + 2 * q * q * d
    cross_attn = 2 * linear_macs(q, d, d) + 2 * linear_macs(tokens, d, d) + 2 * q * tokens * d
    ffn = linear_macs(q, d, ff) + linear_macs(q, ff, d)
    heads = linear_macs(q, d, arch.num_classes) + linear_macs(q, d, d) + linear_macs(q, d, 4)
    return self_attn + cross_attn + ffn + heads


def _check_input(arch: ArchSpec, input_hw: tuple[int, int]) -> tuple[int, int]:
    h, w = input_hw
    stride = arch.max_stride
    if h % stride or w % stride:
        raise InvalidConfigError(f"Input {h}x{w} not divisible by max stride {stride}")
    return h, w


def flops_breakdown(
    arch: ArchSpec, config: DepthConfiguration, input_hw: tuple[int, int]
) -> dict[str, int]:
    """MACs per component (stem, backbone, neck, head).

    Normalisation and activation layers are not counted.
    """
    validate_config(arch, config)
    h, w = _check_input(arch, input_hw)
    out = {"stem": 0, BACKBONE: 0, NECK: 0, "head": 0}

    first = arch.backbone_stages[0]
    n_stem = int(math.log2(first.spatial_scale))
    widths = [3] + [arch.stem_channels] * (n_stem - 1) + [first.in_channels]
    for i in range(n_stem):
        s = 2 ** (i + 1)
        out["stem"] += conv_macs(3, widths[i], widths[i + 1], h // s, w // s)

    prev = None
    for spec in arch.backbone_stages:
        sh, sw = h // spec.spatial_scale, w // spec.spatial_scale
        if prev is not None:
            out[BACKBONE] += conv_macs(3, prev.out_channels, spec.in_channels, sh, sw)
        out[BACKBONE] += stage_macs(spec, config.mode_of(spec.stage_id), sh, sw)
        prev = spec

    for link, spec in zip(arch.neck_links(), arch.neck_stages):
        sh, sw = h // spec.spatial_scale, w // spec.spatial_scale
        if link.source_scale < spec.spatial_scale:
            out[NECK] += conv_macs(3, link.source_channels, link.source_channels, sh, sw)
        out[NECK] += stage_macs(spec, config.mode_of(spec.stage_id), sh, sw)

    d = arch.hidden_dim
    if arch.head_kind is HeadKind.SET_PREDICTION:
        tokens = 0
        for scale, ch in arch.head_inputs():
            sh, sw = h // scale, w // scale
            out["head"] += conv_macs(1, ch, d, sh, sw)
            tokens += sh * sw
        out["head"] += config.decoder_exit * decoder_layer_macs(arch, tokens)
    else:
        for scale, ch in arch.head_inputs():
            sh, sw = h // scale, w // scale
            out["head"] += 2 * conv_macs(3, ch, d, sh, sw)
            out["head"] += conv_macs(1, d, arch.num_classes, sh, sw)
            out["head"] += conv_macs(1, d, 4 * arch.reg_bins, sh, sw)
    return out


def flops_estimate(arch: ArchSpec, config: DepthConfiguration, input_hw: tuple[int, int]) -> int:
    """Total MACs of one forward pass of a single image."""
    return sum(flops_breakdown(arch, config, input_hw).values())


# ---------------------------------------------------------------------------
# Toy presets
# ---------------------------------------------------------------------------

_NECK_IDS = ("FPN-P4", "FPN-P3", "PAN-P4", "PAN-P5")
_NECK_SCALES = (16, 8, 16, 32)


def toy_arch(head_kind: HeadKind | str = HeadKind.SET_PREDICTION, width: int = 32) -> ArchSpec:
    """The desk-scale detector used throughout tests and the CLI.

    Set-prediction: residual backbone with S = 3, 4, 6, 3 and four residual
    encoder stages with S = 3, m = 1. Dense: CSP backbone with S = 2, 2, 4, 4
    and CSP neck stages with S = 2. Both expose 8 adaptable stages.
    """
    head_kind = HeadKind(head_kind)
    widths = (width, 2 * width, 4 * width, 4 * width)
    neck = 2 * width
    if head_kind is HeadKind.SET_PREDICTION:
        kind, blocks, neck_blocks, neck_split = StageKind.RESIDUAL, (3, 4, 6, 3), 3, 1
    else:
        kind, blocks, neck_blocks, neck_split = StageKind.CSP, (2, 2, 4, 4), 2, None

    backbone = tuple(
        StageSpec(f"P{i + 2}", kind, s, c, c, c // 2, 2 ** (i + 2))
        for i, (s, c) in enumerate(zip(blocks, widths))
    )
    lateral = {s.spatial_scale: s.out_channels for s in backbone}
    prev_ch = widths[-1]
    neck_stages = []
    for stage_id, scale in zip(_NECK_IDS, _NECK_SCALES):
        neck_stages.append(
            StageSpec(stage_id, kind, neck_blocks, prev_ch + lateral[scale], neck, neck // 2, scale, neck_split)
        )
        lateral[scale] = neck
        prev_ch = neck
    return ArchSpec(
        backbone_stages=backbone,
        neck_stages=tuple(neck_stages),
        head_kind=head_kind,
        num_classes=3,
        decoder_layers=3,
        num_queries=20,
        hidden_dim=2 * width,
        ffn_dim=4 * width,
        num_heads=4,
        reg_bins=8,
        stem_channels=width // 2,
    )
