"""
Run settings: the JSON file bundling architecture, distillation
hyperparameters and the training schedule.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .config import ArchSpec, HeadKind, _check_keys, toy_arch
from .errors import InvalidSpecError
from .losses import KDHyper

SETTINGS_VERSION = 1
OUT_ENV = "DEPTHDIAL_OUT"
DEFAULT_OUT = "runs"


def output_root(explicit: str | os.PathLike | None = None) -> Path:
    """``explicit`` if given, else ``$DEPTHDIAL_OUT``, else ``runs``."""
    return Path(explicit or os.environ.get(OUT_ENV) or DEFAULT_OUT)


@dataclass(frozen=True)
class Schedule:
    """Optimisation schedule and the synthetic data it trains on."""

    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    eval_every: int = 500
    log_every: int = 50
    grad_clip: float = 10.0
    image_size: int = 128
    train_images: int = 512
    val_images: int = 128
    clutter: float = 0.5

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidSpecError(f"steps must be non-negative, got {self.steps}")
        for name in ("batch_size", "eval_every", "log_every", "image_size", "train_images", "val_images"):
            if getattr(self, name) < 1:
                raise InvalidSpecError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0:
            raise InvalidSpecError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.clutter <= 1.0:
            raise InvalidSpecError(f"clutter must lie in [0, 1], got {self.clutter}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Schedule":
        _check_keys(data, [f.name for f in fields(cls)], "schedule")
        return cls(**data)


@dataclass(frozen=True)
class RunSettings:
    """Everything a training run needs besides the seed.

    Example:
        >>> settings = RunSettings.for_head("dense")
        >>> settings.save("run.json")
        >>> RunSettings.load("run.json") == settings
        True
    """

    arch: ArchSpec
    hyper: KDHyper
    schedule: Schedule = field(default_factory=Schedule)

    @classmethod
    def for_head(cls, head_kind: HeadKind | str, **schedule) -> "RunSettings":
        """Toy architecture and default hyperparameters for a head kind."""
        head_kind = HeadKind(head_kind)
        return cls(toy_arch(head_kind), KDHyper.for_head(head_kind), Schedule(**schedule))

    def with_hyper(self, hyper: KDHyper) -> "RunSettings":
        return RunSettings(self.arch, hyper, self.schedule)

    def to_dict(self) -> dict:
        return {
            "version": SETTINGS_VERSION,
            "arch": self.arch.to_dict(),
            "hyper": self.hyper.to_dict(),
            "schedule": self.schedule.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunSettings":
        """Build settings from a dictionary.

        Raises:
            InvalidSpecError: On a version mismatch, a missing arch section or
                unknown keys at any level
        """
        _check_keys(data, ("version", "arch", "hyper", "schedule"), "settings")
        version = data.get("version", SETTINGS_VERSION)
        if version != SETTINGS_VERSION:
            raise InvalidSpecError(f"Settings version {version} not supported (expected {SETTINGS_VERSION})")
        if "arch" not in data:
            raise InvalidSpecError("Settings need an 'arch' section")
        arch = ArchSpec.from_dict(data["arch"])
        hyper = KDHyper.from_dict(data["hyper"]) if "hyper" in data else KDHyper.for_head(arch.head_kind)
        return cls(arch, hyper, Schedule.from_dict(data.get("schedule", {})))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunSettings":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise InvalidSpecError(f"settings file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise InvalidSpecError(f"{path}: not valid JSON ({e})") from e
        return cls.from_dict(data)
