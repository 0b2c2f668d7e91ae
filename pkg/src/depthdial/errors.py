"""
Exception hierarchy for depthdial.
"""

from __future__ import annotations

from typing import Mapping


class DepthdialError(Exception):
    """Base class for every error raised by depthdial."""


class InvalidSpecError(DepthdialError, ValueError):
    """An architecture, stage or settings descriptor is inconsistent."""


class InvalidConfigError(DepthdialError, ValueError):
    """A depth configuration does not fit the architecture it is used with."""


class InfeasibleMatchError(DepthdialError, ValueError):
    """Bipartite matching asked for more targets than predictions."""


class UndefinedSimilarityError(DepthdialError, ValueError):
    """A similarity index is undefined for the given input (zero variance)."""


class CheckpointError(DepthdialError, RuntimeError):
    """A checkpoint cannot be read: wrong schema version or corrupt payload."""


class NonFiniteLossError(DepthdialError, RuntimeError):
    """A training loss became NaN or Inf.

    Attributes:
        step: Training step at which the loss diverged
        components: Component name -> value at the failing step
    """

    def __init__(self, step: int, phase: str, components: Mapping[str, float]):
        self.step = step
        self.phase = phase
        self.components = dict(components)
        dump = ", ".join(f"{k}={v:.6g}" for k, v in self.components.items())
        super().__init__(f"Non-finite {phase} loss at step {step}: {dump}")
