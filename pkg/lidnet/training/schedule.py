"""
training/schedule.py — Phase bookkeeping for the collaborative strategy.

Freeze pattern: detector pretraining and detector phases freeze the denoiser
parameters Θ; denoiser phases freeze the detector parameters ψ. The
simultaneous baseline never freezes anything.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import FrozenSet, List, Tuple

from torch import nn

from lidnet.errors import InvariantViolation, SchedulingError
from lidnet.models.config import TrainConfig

THETA = "theta"
PSI = "psi"


class Phase(str, enum.Enum):
    PRETRAIN_DET = "pretrain_det"
    DENOISER = "denoiser"
    DETECTOR = "detector"
    SIMULTANEOUS = "simultaneous"
    DONE = "done"

    @property
    def symbol(self) -> str:
        return _SYMBOLS[self]

    @property
    def frozen(self) -> FrozenSet[str]:
        return _FROZEN[self]


_SYMBOLS = {
    Phase.PRETRAIN_DET: "P",
    Phase.DENOISER: "D",
    Phase.DETECTOR: "T",
    Phase.SIMULTANEOUS: "S",
    Phase.DONE: "-",
}

_FROZEN = {
    Phase.PRETRAIN_DET: frozenset({THETA}),
    Phase.DENOISER: frozenset({PSI}),
    Phase.DETECTOR: frozenset({THETA}),
    Phase.SIMULTANEOUS: frozenset(),
    Phase.DONE: frozenset({THETA, PSI}),
}


@dataclass
class TrainSchedule:
    phase: Phase = Phase.PRETRAIN_DET
    step_in_phase: int = 0
    round: int = 0
    frozen: FrozenSet[str] = field(default_factory=lambda: Phase.PRETRAIN_DET.frozen)

    def enter(self, phase: Phase, round_index: int) -> None:
        self.phase = phase
        self.round = round_index
        self.step_in_phase = 0
        self.frozen = phase.frozen


def collaborative_plan(cfg: TrainConfig) -> List[Tuple[Phase, int, int]]:
    """(phase, round, steps) triples unrolling the collaborative loop."""
    plan = [(Phase.PRETRAIN_DET, 0, cfg.t1)]
    for round_index in range(1, cfg.rounds + 1):
        plan.append((Phase.DENOISER, round_index, cfg.t2))
        plan.append((Phase.DETECTOR, round_index, cfg.t3))
    return plan


def expected_trace(cfg: TrainConfig) -> List[str]:
    trace: List[str] = []
    for phase, _, steps in collaborative_plan(cfg):
        trace.extend([phase.symbol] * steps)
    return trace


def freeze(*modules: nn.Module) -> None:
    for module in modules:
        for param in module.parameters():
            param.requires_grad_(False)
            param.grad = None


def unfreeze(*modules: nn.Module) -> None:
    for module in modules:
        for param in module.parameters():
            param.requires_grad_(True)


def is_frozen(module: nn.Module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


def parameter_checksum(*modules: nn.Module) -> str:
    """SHA-256 over the exact bytes of every parameter and buffer."""
    digest = hashlib.sha256()
    for module in modules:
        for name, value in module.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class FrozenGuard:
    """Checks that ``modules`` are frozen on entry and bit-identical on exit."""

    def __init__(self, label: str, *modules: nn.Module):
        self.label = label
        self.modules = modules
        self._checksum = ""

    def __enter__(self) -> "FrozenGuard":
        for module in self.modules:
            if not is_frozen(module):
                raise SchedulingError(f"{self.label} must be frozen before this phase starts")
        self._checksum = parameter_checksum(*self.modules)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None and parameter_checksum(*self.modules) != self._checksum:
            raise InvariantViolation(f"{self.label} changed while frozen")
