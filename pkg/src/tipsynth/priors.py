"""Fingertip position prior per (hand, finger, key) and regional wrist offsets."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .keyboard import NUM_KEYS, NUM_REGIONS, KeyboardGeometry, PressThresholds
from .score import FingeringGrid

HANDS = ("L", "R")
PRIOR_VERSION = 1


class PriorBuildError(ValueError):
    pass


def nearest_rank(sorted_values: np.ndarray, pct: float) -> np.ndarray:
    """Nearest-rank percentile along axis 0 of pre-sorted data (no interpolation)."""
    n = sorted_values.shape[0]
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[rank - 1]


@dataclass
class PositionPriorEntry:
    mean: np.ndarray
    std: np.ndarray
    p25: np.ndarray
    p50: np.ndarray
    p75: np.ndarray
    n: int
    interpolated: bool = False
    donors: tuple = ()

    @classmethod
    def from_observations(cls, obs: np.ndarray) -> "PositionPriorEntry":
        obs = np.asarray(obs, dtype=float)
        s = np.sort(obs, axis=0)
        std = obs.std(axis=0, ddof=1) if len(obs) > 1 else np.zeros(3)
        return cls(obs.mean(axis=0), std, nearest_rank(s, 25), nearest_rank(s, 50), nearest_rank(s, 75), len(obs))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(), "std": self.std.tolist(),
            "p25": self.p25.tolist(), "p50": self.p50.tolist(), "p75": self.p75.tolist(),
            "n": int(self.n), "interpolated": bool(self.interpolated), "donors": list(self.donors),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PositionPriorEntry":
        arr = {k: np.asarray(d[k], dtype=float) for k in ("mean", "std", "p25", "p50", "p75")}
        return cls(n=int(d["n"]), interpolated=bool(d.get("interpolated", False)),
                   donors=tuple(d.get("donors", ())), **arr)


@dataclass
class PositionPrior:
    """880-slot table keyed by (hand, finger 0..4, key 0..87)."""
    entries: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    min_count: int = 10

    def get(self, hand: str, finger: int, key: int) -> Optional[PositionPriorEntry]:
        return self.entries.get((hand, finger, key))

    def __getitem__(self, slot) -> PositionPriorEntry:
        entry = self.entries.get(slot)
        if entry is None:
            raise KeyError(f"prior slot {slot} is empty")
        return entry

    def median(self, hand: str, finger: int, key: int) -> np.ndarray:
        return self[(hand, finger, key)].p50

    def median_table(self, hand: str) -> np.ndarray:
        """5 x 88 x 3 medians for fast lookup (NaN where empty)."""
        out = np.full((5, NUM_KEYS, 3), np.nan)
        for f in range(5):
            for k in range(NUM_KEYS):
                e = self.entries.get((hand, f, k))
                if e is not None:
                    out[f, k] = e.p50
        return out

    @property
    def coverage(self) -> int:
        return len(self.entries)

    def is_complete(self) -> bool:
        return self.coverage == 2 * 5 * NUM_KEYS

    def to_dict(self) -> dict:
        return {
            "prior_version": PRIOR_VERSION,
            "units": "mm",
            "min_count": self.min_count,
            "counts": {f"{h}/{f + 1}/{k}": int(n) for (h, f, k), n in sorted(self.counts.items())},
            "entries": {f"{h}/{f + 1}/{k}": e.to_dict() for (h, f, k), e in sorted(self.entries.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict) -> "PositionPrior":
        if doc.get("prior_version") != PRIOR_VERSION:
            raise PriorBuildError(f"unsupported prior_version {doc.get('prior_version')}")

        def slot(s):
            h, f, k = s.split("/")
            return h, int(f) - 1, int(k)

        entries = {slot(s): PositionPriorEntry.from_dict(d) for s, d in doc["entries"].items()}
        counts = {slot(s): n for s, n in doc.get("counts", {}).items()}
        return cls(entries, counts, doc.get("min_count", 10))

    @classmethod
    def load(cls, path) -> "PositionPrior":
        return cls.from_dict(json.loads(Path(path).read_text()))


def collect_press_observations(tip_trajs: Sequence[dict], fingerings: Sequence[FingeringGrid]) -> dict:
    """Group fingertip positions by the (hand, finger, key) that is actively pressed."""
    if len(tip_trajs) != len(fingerings):
        raise PriorBuildError("need one fingering per trajectory")
    obs: dict = {}
    for traj, fing in zip(tip_trajs, fingerings):
        for hand in HANDS:
            tips = np.asarray(traj[hand])
            if tips.shape[0] != fing.T:
                raise PriorBuildError(f"trajectory has {tips.shape[0]} frames, fingering {fing.T}")
            keys = fing.hand_keys(hand)
            for f in range(5):
                frames = np.flatnonzero(keys[:, f] >= 0)
                for k in np.unique(keys[frames, f]):
                    sel = frames[keys[frames, f] == k]
                    obs.setdefault((hand, f, int(k)), []).append(tips[sel, f])
    return {slot: np.concatenate(chunks) for slot, chunks in obs.items()}


def build_position_prior(tip_trajs: Sequence[dict], fingerings: Sequence[FingeringGrid],
                         min_count: int = 10) -> PositionPrior:
    """Robust per-slot statistics; slots with fewer than ``min_count`` frames stay empty."""
    obs = collect_press_observations(tip_trajs, fingerings)
    prior = PositionPrior(min_count=min_count)
    for slot in sorted(obs):
        o = obs[slot]
        prior.counts[slot] = len(o)
        if len(o) >= min_count:
            prior.entries[slot] = PositionPriorEntry.from_observations(o)
    return prior


def _pick_donors(k: int, donors: np.ndarray):
    lower = donors[donors < k]
    upper = donors[donors > k]
    return (int(lower.max()) if lower.size else None, int(upper.min()) if upper.size else None)


def interpolate_missing(prior: PositionPrior, geom: KeyboardGeometry) -> PositionPrior:
    """Fill empty slots from neighbouring keys of the same hand and finger.

    X and Z come from linear interpolation (in key-centre Y) between the
    nearest lower and upper donors, or are copied from the single nearest
    donor at the keyboard ends. Y is re-anchored on the target key's centre.
    Donors of the same key colour are preferred so black-key slots keep a
    black-key contact depth.
    """
    out = PositionPrior(dict(prior.entries), dict(prior.counts), prior.min_count)
    yc = geom.y_centers
    black = np.array([geom.is_black(k) for k in range(NUM_KEYS)])
    for hand in HANDS:
        for f in range(5):
            populated = np.array([k for k in range(NUM_KEYS) if (hand, f, k) in prior.entries], dtype=int)
            if populated.size == 0:
                raise PriorBuildError(f"no populated slots for hand {hand} finger {f + 1}")
            for k in range(NUM_KEYS):
                if (hand, f, k) in prior.entries:
                    continue
                same = populated[black[populated] == black[k]]
                pool = same if same.size else populated
                lo, hi = _pick_donors(k, pool)
                if lo is not None and hi is not None:
                    t = (yc[k] - yc[lo]) / (yc[hi] - yc[lo])
                    a, b = prior.entries[(hand, f, lo)], prior.entries[(hand, f, hi)]
                    mix = lambda u, v: (1 - t) * u + t * v  # noqa: E731
                    donors = (lo, hi)
                else:
                    a = b = prior.entries[(hand, f, lo if lo is not None else hi)]
                    mix = lambda u, v: u  # noqa: E731
                    donors = (lo if lo is not None else hi,)
                p50 = np.array(mix(a.p50, b.p50), dtype=float)
                mean = np.array(mix(a.mean, b.mean), dtype=float)
                lo_spread = mix(a.p50 - a.p25, b.p50 - b.p25)
                hi_spread = mix(a.p75 - a.p50, b.p75 - b.p50)
                p50[1] = yc[k]
                mean[1] = yc[k]
                out.entries[(hand, f, k)] = PositionPriorEntry(
                    mean=mean, std=mix(a.std, b.std), p25=p50 - lo_spread, p50=p50,
                    p75=p50 + hi_spread, n=0, interpolated=True, donors=donors)
    return out


def validate_prior(prior: PositionPrior, geom: KeyboardGeometry,
                   thresholds: Optional[PressThresholds] = None) -> list[tuple]:
    """Slots whose median does not sit over its own key below the press plane."""
    thr = thresholds or geom.thresholds
    bad = []
    for (h, f, k), e in sorted(prior.entries.items()):
        found = geom.key_at(e.p50)
        if found != k or not geom.is_pressed(e.p50, k, thr):
            bad.append((h, f, k))
    return bad


# --------------------------------------------------------------------------
# Wrist offsets


@dataclass
class WristOffsetPrior:
    offsets: np.ndarray  # 2 x 8 x 3, hand order L, R
    counts: np.ndarray   # 2 x 8

    def offset(self, hand: str, region: int) -> np.ndarray:
        return self.offsets[HANDS.index(hand), region]

    def to_dict(self) -> dict:
        return {"prior_version": PRIOR_VERSION, "units": "mm",
                "offsets": self.offsets.tolist(), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "WristOffsetPrior":
        return cls(np.asarray(d["offsets"], dtype=float), np.asarray(d["counts"], dtype=int))


def active_region(keys_row: np.ndarray) -> Optional[int]:
    """Region of the rounded mean active key, or None when nothing is pressed."""
    from .keyboard import region_of
    active = keys_row[keys_row >= 0]
    if active.size == 0:
        return None
    return region_of(int(math.floor(active.mean() + 0.5)))


def build_wrist_offsets(wrist_trajs: Sequence[dict], tip_trajs: Sequence[dict],
                        fingerings: Sequence[FingeringGrid], geom: Optional[KeyboardGeometry] = None
                        ) -> WristOffsetPrior:
    """Mean (wrist - centroid of pressing fingertips) per hand and pitch region.

    Empty regions take the value of the nearest populated region of the same
    hand (lower region on ties); a hand with no contributing frames takes the
    global mean over both hands.
    """
    sums = np.zeros((2, NUM_REGIONS, 3))
    counts = np.zeros((2, NUM_REGIONS), dtype=int)
    for wrist, tips, fing in zip(wrist_trajs, tip_trajs, fingerings):
        for hi, hand in enumerate(HANDS):
            keys = fing.hand_keys(hand)
            w = np.asarray(wrist[hand])
            p = np.asarray(tips[hand])
            for t in range(fing.T):
                region = active_region(keys[t])
                if region is None:
                    continue
                pressing = keys[t] >= 0
                sums[hi, region] += w[t] - p[t, pressing].mean(axis=0)
                counts[hi, region] += 1
    if counts.sum() == 0:
        raise PriorBuildError("no frames with active presses; cannot build wrist offsets")
    offsets = np.zeros_like(sums)
    global_mean = sums.sum(axis=(0, 1)) / counts.sum()
    for hi in range(2):
        populated = np.flatnonzero(counts[hi] > 0)
        for r in range(NUM_REGIONS):
            if counts[hi, r]:
                offsets[hi, r] = sums[hi, r] / counts[hi, r]
            elif populated.size:
                src = populated[np.argmin(np.abs(populated - r))]
                offsets[hi, r] = sums[hi, src] / counts[hi, src]
            else:
                offsets[hi, r] = global_mean
    return WristOffsetPrior(offsets, counts)
