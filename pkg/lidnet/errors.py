"""
errors.py — Exception hierarchy shared by every lidnet module.
The CLI maps each family onto a stable exit code (see EXIT_CODES).
"""
from __future__ import annotations

from typing import Optional


class LidnetError(Exception):
    """Base class for all lidnet errors."""


class ConfigurationError(LidnetError, ValueError):
    """Invalid or infeasible configuration."""


class DataError(LidnetError, ValueError):
    """Input data violates a contract (non-finite pixels, bad annotations)."""


class DatasetValidationError(DataError):
    """A dataset loaded from disk fails its invariants."""


class DatasetIOError(LidnetError, OSError):
    """Missing or corrupt dataset/checkpoint file."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message}: {path}" if path else message)
        self.path = path


class ContractError(LidnetError, ValueError):
    """Shape or argument contract broken by the caller."""


class TrainingError(LidnetError, RuntimeError):
    """Training diverged (non-finite loss or gradient)."""

    def __init__(self, message: str, step: Optional[int] = None, phase: Optional[str] = None):
        context = []
        if phase is not None:
            context.append(f"phase={phase}")
        if step is not None:
            context.append(f"step={step}")
        suffix = f" ({', '.join(context)})" if context else ""
        super().__init__(f"{message}{suffix}")
        self.step = step
        self.phase = phase


class SchedulingError(LidnetError, RuntimeError):
    """Freeze/unfreeze state does not match the active training phase."""


class InvariantViolation(SchedulingError):
    """A parameter set changed while it was frozen."""


class MissingArtifactError(LidnetError, FileNotFoundError):
    """A checkpoint or run artifact required by a command is absent."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message}: {path}" if path else message)
        self.path = path


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_MISSING_CHECKPOINT = 5
EXIT_MISSING_ARTIFACTS = 6
