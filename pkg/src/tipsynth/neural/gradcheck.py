"""Reverse-mode gradients versus central finite differences, in float64."""
from __future__ import annotations

import copy
from typing import Callable, Optional, Sequence

import torch


class GradCheckFailure(RuntimeError):
    pass


def _relative(a: torch.Tensor, n: torch.Tensor, floor: float) -> torch.Tensor:
    scale = torch.maximum(a.abs(), n.abs())
    diff = (a - n).abs()
    # both sides negligible: compare absolutely
    return torch.where(scale < floor, diff, diff / scale.clamp_min(floor))


def gradient_check(module: torch.nn.Module, inputs: Sequence[torch.Tensor],
                   loss_fn: Optional[Callable] = None, eps: float = 1e-3,
                   wrt_inputs: Sequence[int] = (), floor: float = 1e-8,
                   max_params: int = 20_000) -> float:
    """Maximum relative error between autograd and central differences.

    ``loss_fn`` maps the module output to a scalar; when omitted the output
    itself must be scalar. Every parameter entry is checked, plus the input
    tensors listed in ``wrt_inputs``.
    """
    m = copy.deepcopy(module).double()
    xs = [x.detach().double().clone() if torch.is_tensor(x) and x.is_floating_point() else x for x in inputs]
    for i in wrt_inputs:
        xs[i].requires_grad_(True)

    def evaluate():
        out = m(*xs)
        loss = loss_fn(out) if loss_fn is not None else out
        if loss.numel() != 1:
            raise GradCheckFailure("module output is not a scalar; pass loss_fn")
        if not torch.isfinite(loss):
            raise GradCheckFailure("loss is not finite")
        return loss.reshape(())

    targets = [p for p in m.parameters() if p.requires_grad] + [xs[i] for i in wrt_inputs]
    if sum(t.numel() for t in targets) > max_params:
        raise GradCheckFailure(f"too many parameters for a finite-difference check (> {max_params})")
    m.zero_grad()
    evaluate().backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in targets]

    worst = 0.0
    with torch.no_grad():
        for t, g in zip(targets, analytic):
            flat = t.view(-1)
            numeric = torch.empty_like(flat)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                up = evaluate().item()
                flat[j] = orig - eps
                down = evaluate().item()
                flat[j] = orig
                numeric[j] = (up - down) / (2 * eps)
            if numeric.numel():
                worst = max(worst, _relative(g.view(-1), numeric, floor).max().item())
    return worst
