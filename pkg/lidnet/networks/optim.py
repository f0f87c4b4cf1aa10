"""
networks/optim.py — Adam updater shared by generator, critic and detector.
"""
from __future__ import annotations

import logging
from typing import Tuple

import torch
from torch import nn

from lidnet.errors import ConfigurationError, TrainingError

logger = logging.getLogger(__name__)


class ParameterUpdater:
    """One Adam optimizer over a module, refusing non-finite gradients.

    Frozen parameters (``requires_grad=False``) carry no gradient and are
    never touched by ``step``.
    """

    def __init__(
        self,
        module: nn.Module,
        lr: float,
        name: str = "params",
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be > 0, got {lr}")
        self.module = module
        self.name = name
        self.optimizer = torch.optim.Adam(module.parameters(), lr=lr, betas=betas, eps=eps)
        self.steps = 0

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def step(self, phase: str = "") -> None:
        for param in self.module.parameters():
            if not param.requires_grad:
                param.grad = None
            elif param.grad is not None and not torch.isfinite(param.grad).all():
                raise TrainingError(f"non-finite gradient in {self.name}", step=self.steps, phase=phase or None)
        self.optimizer.step()
        self.steps += 1

    def state_dict(self) -> dict:
        return {"optimizer": self.optimizer.state_dict(), "steps": self.steps}

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.steps = int(state.get("steps", 0))
