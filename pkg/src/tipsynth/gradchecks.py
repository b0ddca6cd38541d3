"""Finite-difference gradient checks for every learned building block and loss head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .neural.blocks import (FiLMGenerator, GraphConv, MultiHeadSelfAttention, TemporalGraphConv,
                            TemporalResBlock, film)
from .neural.gradcheck import gradient_check
from .pose import build_hand_graph, pose_loss
from .refinement import refine_loss, SmootherNet

SMOOTH_TOL = 1e-4
GENERAL_TOL = 1e-3
# small step in float64: truncation error ~eps^2 stays far below rounding noise
EPS = 1e-5


@dataclass
class GradCheckCase:
    name: str
    tolerance: float
    run: Callable[[], float]


@dataclass
class GradCheckOutcome:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _projection(shape, gen) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def _scalarize(out: torch.Tensor, gen) -> Callable:
    # fixed random projection plus a quadratic term, so every output entry matters
    w = _projection(out.shape, gen)
    return lambda o: (o * w).sum() + 0.5 * (o ** 2).sum()


class _FiLMApply(nn.Module):
    def __init__(self, cond_dim, features):
        super().__init__()
        self.gen = FiLMGenerator(cond_dim, features, hidden=6)

    def forward(self, x, cond):
        g, b = self.gen(cond)[0]
        return film(x, g, b)


class _LossHead(nn.Module):
    """Loss as a function of a learnable prediction tensor."""

    def __init__(self, pred: torch.Tensor, fn: Callable):
        super().__init__()
        self.pred = nn.Parameter(pred.clone())
        self.fn = fn

    def forward(self):
        return self.fn(self.pred)


def _module_case(name, tol, make, inputs, seed=0, wrt=(0,)):
    def run():
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed + 1)
        m = make().double()
        xs = [x(gen) if callable(x) else x for x in inputs]
        with torch.no_grad():
            out = m(*xs)
        return gradient_check(m, xs, _scalarize(out, gen), eps=EPS, wrt_inputs=wrt)
    return GradCheckCase(name, tol, run)


def _rand(*shape):
    return lambda gen: torch.randn(*shape, generator=gen, dtype=torch.float64)


def _natural_pose(gen, T=3):
    from .corpus import build_hand_joints
    tips = np.zeros((T, 5, 3))
    tips[:, :, 0] = [30, 40, 45, 42, 30]
    tips[:, :, 1] = [0, 22, 44, 66, 88]
    tips[:, :, 2] = 8.0
    tips += np.random.default_rng(int(torch.randint(0, 1000, (1,), generator=gen))).normal(0, 1.0, tips.shape)
    return torch.from_numpy(build_hand_joints(tips, "R", tips[:, :, 1].mean(axis=1), 59.94))


def _refine_loss_case():
    def run():
        gen = torch.Generator().manual_seed(7)
        gt = torch.randn(2, 6, 5, 3, generator=gen, dtype=torch.float64) * 10
        pred = gt + torch.randn(gt.shape, generator=gen, dtype=torch.float64)
        head = _LossHead(pred, lambda p: refine_loss(p, gt, 1.0, 0.5))
        return gradient_check(head, [], eps=EPS)
    return GradCheckCase("loss/refine", SMOOTH_TOL, run)


def _pose_loss_case():
    def run():
        gen = torch.Generator().manual_seed(11)
        gt = _natural_pose(gen)
        from .pose import bone_lengths
        bones = bone_lengths(gt).mean(dim=0).numpy()
        pred = gt + torch.randn(gt.shape, generator=gen, dtype=torch.float64) * 2.0
        head = _LossHead(pred, lambda p: pose_loss(p, gt, bones, "R").total)
        return gradient_check(head, [], eps=EPS)
    return GradCheckCase("loss/pose", GENERAL_TOL, run)


def standard_cases() -> list[GradCheckCase]:
    adj = torch.from_numpy(build_hand_graph().adjacency).double()
    return [
        _module_case("linear", SMOOTH_TOL, lambda: nn.Linear(5, 4), [_rand(3, 5)]),
        _module_case("attention", SMOOTH_TOL, lambda: MultiHeadSelfAttention(8, 2), [_rand(1, 6, 8)]),
        _module_case("temporal_conv", SMOOTH_TOL, lambda: TemporalResBlock(4, 3), [_rand(1, 4, 7)]),
        _module_case("graph_conv", SMOOTH_TOL, lambda: GraphConv(2, 3, adj), [_rand(1, 2, 2, 21)]),
        _module_case("temporal_graph_conv", SMOOTH_TOL, lambda: TemporalGraphConv(3, 3), [_rand(1, 3, 6, 21)]),
        _module_case("film", SMOOTH_TOL, lambda: _FiLMApply(3, 4), [_rand(1, 5, 4), _rand(1, 5, 3)], wrt=(0, 1)),
        _module_case("smoother", SMOOTH_TOL, lambda: SmootherNet(3, 1, 3), [_rand(2, 8)]),
        _refine_loss_case(),
        _pose_loss_case(),
    ]


def run_gradchecks(cases=None) -> list[GradCheckOutcome]:
    return [GradCheckOutcome(c.name, c.run(), c.tolerance) for c in (cases or standard_cases())]
