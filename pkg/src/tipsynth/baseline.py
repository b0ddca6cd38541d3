"""Stage 1: deterministic fingertip placement from the position prior."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .keyboard import KeyboardGeometry
from .priors import PositionPrior, validate_prior
from .score import FingeringGrid

logger = logging.getLogger(__name__)

# keys under thumb..pinky when a hand has not played yet
REST_KEYS = {"R": (39, 40, 41, 42, 43), "L": (39, 38, 37, 36, 35)}
# +1: higher finger index sits at higher Y
FINGER_DIRECTION = {"R": 1.0, "L": -1.0}


@dataclass
class BaselineConfig:
    hover_mm: float = 14.0
    finger_spacing: float = 23.5
    # per hand, per finger lateral (Y) correction for non-pressing fingers
    lateral_corrections: dict = field(default_factory=lambda: {"L": [0.0] * 5, "R": [0.0] * 5})


class PlacementTable:
    """Prior medians cached as arrays for per-frame lookup."""

    def __init__(self, prior: PositionPrior, geom: KeyboardGeometry):
        if not prior.is_complete():
            raise ValueError(f"prior covers {prior.coverage}/880 slots; interpolate before synthesis")
        self.medians = {h: prior.median_table(h) for h in ("L", "R")}
        self.geom = geom
        bad = validate_prior(prior, geom)
        if bad:
            logger.debug("%d prior medians are not a valid press on their own key, e.g. %s", len(bad), bad[:5])
        self.invalid_slots = set(bad)


def rest_pose(hand: str, table: PlacementTable, cfg: BaselineConfig) -> np.ndarray:
    med = table.medians[hand]
    out = np.empty((5, 3))
    for f, k in enumerate(REST_KEYS[hand]):
        out[f] = med[f, k]
        out[f, 2] += cfg.hover_mm
    return out


def place_frame(hand: str, finger_keys: np.ndarray, table: PlacementTable,
                cfg: Optional[BaselineConfig] = None, previous: Optional[np.ndarray] = None) -> np.ndarray:
    """5 x 3 fingertip positions of one hand for one frame.

    Pressing fingers sit at the prior median of their (hand, finger, key).
    Each other finger copies X and Z + hover from the nearest pressing finger
    (lower finger on ties) and offsets Y by the finger spacing per finger gap.
    Without any pressing finger the previous placement (or rest pose) is held.
    """
    cfg = cfg or BaselineConfig()
    anchors = np.flatnonzero(np.asarray(finger_keys) >= 0)
    if anchors.size == 0:
        return previous.copy() if previous is not None else rest_pose(hand, table, cfg)
    med = table.medians[hand]
    out = np.empty((5, 3))
    direction = FINGER_DIRECTION[hand]
    lateral = cfg.lateral_corrections[hand]
    for f in range(5):
        k = finger_keys[f]
        if k >= 0:
            out[f] = med[f, k]
            continue
        a = anchors[np.argmin(np.abs(anchors - f))]
        anchor = med[a, finger_keys[a]]
        out[f, 0] = anchor[0]
        out[f, 1] = anchor[1] + direction * cfg.finger_spacing * (f - a) + lateral[f]
        out[f, 2] = anchor[2] + cfg.hover_mm
    return out


def synthesize_baseline(fingering: FingeringGrid, table: PlacementTable,
                        cfg: Optional[BaselineConfig] = None,
                        initial: Optional[dict] = None) -> dict:
    """Per-hand T x 5 x 3 fingertip trajectories; silent frames hold the last placement."""
    cfg = cfg or BaselineConfig()
    out = {}
    for hand in ("L", "R"):
        keys = fingering.hand_keys(hand)
        traj = np.empty((fingering.T, 5, 3))
        prev = None if initial is None else initial.get(hand)
        for t in range(fingering.T):
            if t and np.array_equal(keys[t], keys[t - 1]):
                traj[t] = traj[t - 1]
                continue
            traj[t] = place_frame(hand, keys[t], table, cfg, prev)
            prev = traj[t]
        out[hand] = traj
    return out
