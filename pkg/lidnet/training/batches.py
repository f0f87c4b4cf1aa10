"""
training/batches.py — Seeded minibatches over a dataset split.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from lidnet.errors import DataError
from lidnet.phantoms.base import CtSample


@dataclass
class Batch:
    ids: List[str]
    ldct: Tensor                                  # (B, H, W)
    ndct: Tensor                                  # (B, H, W)
    annotations: List[Tuple[Tensor, Tensor]]      # per image: corner boxes (n, 4), labels (n,)

    def __len__(self) -> int:
        return len(self.ids)


def collate(samples: Sequence[CtSample], dtype: torch.dtype = torch.float32) -> Batch:
    if not samples:
        raise DataError("cannot collate an empty batch")
    return Batch(
        ids=[s.id for s in samples],
        ldct=torch.from_numpy(np.stack([s.ldct for s in samples])).to(dtype),
        ndct=torch.from_numpy(np.stack([s.ndct for s in samples])).to(dtype),
        annotations=[
            (torch.from_numpy(s.boxes()).to(dtype), torch.from_numpy(s.labels()))
            for s in samples
        ],
    )


class BatchSampler:
    """Endless stream of shuffled batches; the order depends only on ``seed``."""

    def __init__(self, samples: Sequence[CtSample], batch_size: int, seed: int = 0):
        if not samples:
            raise DataError("batch sampler needs at least one sample")
        if batch_size < 1:
            raise DataError("batch_size must be >= 1")
        self.samples = list(samples)
        self.batch_size = min(batch_size, len(self.samples))
        self._rng = np.random.default_rng(seed)
        self._order: List[int] = []

    def next_batch(self) -> Batch:
        picked: List[int] = []
        while len(picked) < self.batch_size:
            if not self._order:
                self._order = self._rng.permutation(len(self.samples)).tolist()
            picked.append(self._order.pop())
        return collate([self.samples[i] for i in picked])

    def state_dict(self) -> Dict[str, Any]:
        return {"rng": self._rng.bit_generator.state, "order": list(self._order)}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self._rng.bit_generator.state = state["rng"]
        self._order = [int(i) for i in state["order"]]
