"""Seeded Adam training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .params import ParamStore

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: ParamStore
    losses: list = field(default_factory=list)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def train(model: torch.nn.Module, dataset: Sequence, loss_fn: Callable, steps: int, seed: int,
          lr: float = 1e-3, batch_size: int = 1, collate: Optional[Callable] = None,
          grad_clip: Optional[float] = 1.0, meta: Optional[dict] = None) -> TrainResult:
    """Minimise ``loss_fn(model, batch)`` with Adam.

    Batches are drawn from ``dataset`` in a seeded shuffled order, so the same
    seed and data give bit-identical parameters and loss curves.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    order: list[int] = []
    losses = []
    model.train()
    for step in range(steps):
        idx = []
        while len(idx) < min(batch_size, len(dataset)):
            if not order:
                order = rng.permutation(len(dataset)).tolist()
            idx.append(order.pop())
        items = [dataset[i] for i in idx]
        batch = collate(items) if collate else items
        opt.zero_grad()
        loss = loss_fn(model, batch)
        value = float(loss.detach())
        if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise TrainingDiverged(f"loss {value} at step {step}")
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
        opt.step()
        losses.append(value)
        if step % 100 == 0:
            logger.debug("step %d loss %.5f", step, value)
    model.eval()
    return TrainResult(ParamStore.from_module(model, seed, meta), losses)
