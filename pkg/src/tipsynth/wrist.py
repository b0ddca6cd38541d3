"""Stage 3: wrist trajectories from region offsets plus a conditioned temporal CNN."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .keyboard import KeyboardGeometry, region_of
from .neural.blocks import FiLMGenerator, TemporalResNet, film
from .priors import WristOffsetPrior, active_region
from .refinement import (POS_SCALE, InferenceError, ResidualBounds, SmootherNet, clamp_residual,
                         smooth_trajectory)

WRIST_FEATURE_DIM = 18


def _initial_region(keys: np.ndarray, tips: np.ndarray, geom: KeyboardGeometry) -> int:
    for row in keys:
        r = active_region(row)
        if r is not None:
            return r
    # nothing pressed in the whole span: region of the key nearest the hand
    y = tips[0, :, 1].mean()
    return region_of(int(np.argmin(np.abs(geom.y_centers - y))))


def base_wrist(tips: np.ndarray, hand_keys: np.ndarray, offsets: WristOffsetPrior, hand: str,
               geom: KeyboardGeometry) -> np.ndarray:
    """T x 3: centroid of pressing tips (all five when silent) plus the region offset.

    Silent frames keep the region of the most recent active frame; silence
    before any press uses the first upcoming active region.
    """
    tips = np.asarray(tips, dtype=float)
    T = tips.shape[0]
    out = np.empty((T, 3))
    region = _initial_region(hand_keys, tips, geom)
    for t in range(T):
        pressing = hand_keys[t] >= 0
        r = active_region(hand_keys[t])
        if r is not None:
            region = r
            centroid = tips[t, pressing].mean(axis=0)
        else:
            centroid = tips[t].mean(axis=0)
        out[t] = centroid + offsets.offset(hand, region)
    return out


def wrist_features(base: np.ndarray, tips: np.ndarray, pressed10: np.ndarray, hand_keys: np.ndarray,
                   geom: KeyboardGeometry, center: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """T x 18: base wrist and tip centroid (relative, scaled), press flags of this
    hand then the other, active-key centroid Y and a has-active-key flag.

    Positions and ``center`` share one frame; ``sign = -1`` when it is Y-mirrored.
    """
    pressing = hand_keys >= 0
    n = pressing.sum(axis=1)
    safe = np.where(pressing, hand_keys, 0)
    ysum = np.where(pressing, sign * geom.y_centers[safe], 0.0).sum(axis=1)
    key_y = np.where(n > 0, (ysum / np.maximum(n, 1) - center[1]) / POS_SCALE, 0.0)
    return np.concatenate([
        (base - center) / POS_SCALE,
        (tips.mean(axis=1) - center) / POS_SCALE,
        pressed10.astype(float),
        key_y[:, None],
        (n > 0).astype(float)[:, None],
    ], axis=1).astype(np.float32)


@dataclass
class WristNetConfig:
    channels: int = 64
    blocks: int = 6
    kernel: int = 9
    cond_dim: int = 0
    fusion: str = "film"
    cond_hidden: int = 64

    def __post_init__(self):
        if self.fusion not in ("film", "concat"):
            raise ValueError(f"unknown fusion {self.fusion!r}")


class WristNet(nn.Module):
    """Temporal residual CNN predicting a T x 3 wrist residual (mm)."""

    def __init__(self, cfg: WristNetConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = WRIST_FEATURE_DIM
        if cfg.cond_dim and cfg.fusion == "concat":
            self.cond_proj = nn.Linear(cfg.cond_dim, cfg.cond_hidden)
            in_dim += cfg.cond_hidden
        self.in_proj = nn.Linear(in_dim, cfg.channels)
        self.body = TemporalResNet(cfg.channels, cfg.blocks, cfg.kernel)
        if cfg.cond_dim and cfg.fusion == "film":
            self.film = FiLMGenerator(cfg.cond_dim, cfg.channels, cfg.cond_hidden, groups=cfg.blocks + 1)
        self.head = nn.Linear(cfg.channels, 3)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, feats, cond=None):
        parts = [feats]
        use_cond = self.cfg.cond_dim and cond is not None
        if use_cond and self.cfg.fusion == "concat":
            parts.append(torch.nn.functional.gelu(self.cond_proj(cond)))
        h = self.in_proj(torch.cat(parts, dim=-1))
        modulation = None
        if use_cond and self.cfg.fusion == "film":
            modulation = self.film(cond)
            h = film(h, *modulation[0])
            modulation = modulation[1:]
        h = self.body(h, modulation)
        return self.head(h) * POS_SCALE


def refine_wrist(base: np.ndarray, feats: Optional[np.ndarray], model: Optional[WristNet],
                 midi: Optional[np.ndarray] = None, bounds: ResidualBounds = ResidualBounds(),
                 smoothing_radius: Optional[int] = 4, smoother: Optional[SmootherNet] = None,
                 raw_residual: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """``base + clamp(residual, ±50)`` then unmasked smoothing.

    Returns (wrist trajectory, clamped residual). ``smoothing_radius=None``
    disables smoothing.
    """
    base = np.asarray(base, dtype=float)
    if raw_residual is None:
        if model is None:
            raw_residual = np.zeros_like(base)
        else:
            with torch.no_grad():
                cond = None
                if model.cfg.cond_dim and midi is not None:
                    cond = torch.from_numpy(np.asarray(midi, dtype=np.float32))[None]
                raw_residual = model(torch.from_numpy(feats)[None], cond)[0].numpy().astype(float)
    if not np.all(np.isfinite(raw_residual)):
        raise InferenceError("wrist network produced non-finite residuals")
    res = clamp_residual(raw_residual, bounds.wrist_clamp)
    out = base + res
    if smoothing_radius is not None:
        out = smooth_trajectory(out[:, None, :], None, smoothing_radius, smoother)[:, 0, :]
    return out, res
