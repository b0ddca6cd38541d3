"""Key-contact detection and scoring, position errors and acceleration ratios."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from .keyboard import KeyboardGeometry, PressThresholds
from .pose import TIP_JOINTS
from .score import FPS, NoteEvent


@dataclass(frozen=True, order=True)
class PressEvent:
    start_frame: int
    end_frame: int
    key: int
    finger: Optional[int] = None
    hand: Optional[str] = None

    def __post_init__(self):
        if self.start_frame > self.end_frame:
            raise ValueError("press event ends before it starts")

    def onset(self, fps: Fraction = FPS) -> float:
        return float(self.start_frame / fps)


def pressed_key_track(traj: np.ndarray, geom: KeyboardGeometry,
                      thresholds: Optional[PressThresholds] = None) -> np.ndarray:
    """T x F key under each tip when it is pressed, else -1."""
    traj = np.asarray(traj, dtype=float)
    if not np.all(np.isfinite(traj)):
        raise ValueError("trajectory must be finite")
    if thresholds is None:
        return geom.pressed_keys(traj)
    keys = geom.keys_at(traj)
    safe = np.where(keys >= 0, keys, 0)
    limit = np.where(geom.is_black(safe), thresholds.black_z, thresholds.white_z)
    return np.where((keys >= 0) & (traj[..., 2] <= limit), keys, -1)


def detect_presses(traj: np.ndarray, geom: KeyboardGeometry, thresholds: Optional[PressThresholds] = None,
                   min_frames: int = 2, hand: Optional[str] = None) -> list[PressEvent]:
    """Contiguous same-key pressed runs per fingertip, keeping runs of at least ``min_frames``."""
    track = pressed_key_track(traj, geom, thresholds)
    events = []
    T, nf = track.shape
    for f in range(nf):
        col = track[:, f]
        t = 0
        while t < T:
            k = col[t]
            if k < 0:
                t += 1
                continue
            s = t
            while t + 1 < T and col[t + 1] == k:
                t += 1
            if t - s + 1 >= min_frames:
                events.append(PressEvent(s, t, int(k), f, hand))
            t += 1
    return sorted(events)


@dataclass
class F1Result:
    precision: float
    recall: float
    f1: float
    matched: int
    n_pred: int
    n_gt: int
    pairs: list = field(default_factory=list, repr=False)


def f1_from_counts(matched: int, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    p = matched / n_pred if n_pred else 0.0
    r = matched / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def _match_sweep(pred: list, gt: list, tol: float) -> list:
    """Per key, each prediction (in onset order) takes the earliest admissible unmatched note.

    Admissible note windows [p - tol, p + tol] move monotonically with p, so
    this greedy choice yields a maximum matching.
    """
    pairs = []
    by_key_p, by_key_g = defaultdict(list), defaultdict(list)
    for i, (t, k) in enumerate(pred):
        by_key_p[k].append((t, i))
    for j, (t, k) in enumerate(gt):
        by_key_g[k].append((t, j))
    for k, ps in by_key_p.items():
        gs = sorted(by_key_g.get(k, []))
        ptr = 0
        for t, i in sorted(ps):
            while ptr < len(gs) and gs[ptr][0] < t - tol:
                ptr += 1
            if ptr < len(gs) and gs[ptr][0] <= t + tol:
                pairs.append((i, gs[ptr][1]))
                ptr += 1
    return pairs


def _match_nearest(pred: list, gt: list, tol: float) -> list:
    """Globally nearest-onset-first greedy; can fall short of the maximum matching."""
    cands = sorted((abs(tp - tg), tp, tg, i, j) for i, (tp, kp) in enumerate(pred)
                   for j, (tg, kg) in enumerate(gt) if kp == kg and abs(tp - tg) <= tol)
    used_p, used_g, pairs = set(), set(), []
    for _, _, _, i, j in cands:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            pairs.append((i, j))
    return pairs


MATCHERS = {"sweep": _match_sweep, "nearest": _match_nearest}


def key_contact_f1(pred_events: Sequence[PressEvent], gt_notes: Sequence[NoteEvent],
                   fps: Fraction = FPS, onset_tol_ms: float = 100.0, strategy: str = "sweep") -> F1Result:
    """One-to-one key-only matching of detected presses to notes within an onset tolerance."""
    tol = onset_tol_ms / 1000.0 + 1e-9
    pred = [(e.onset(fps), e.key) for e in pred_events]
    gt = [(n.onset, n.key) for n in gt_notes]
    pairs = MATCHERS[strategy](pred, gt, tol)
    p, r, f = f1_from_counts(len(pairs), len(pred), len(gt))
    return F1Result(p, r, f, len(pairs), len(pred), len(gt), pairs)


def frame_level_counts(pred_keys: np.ndarray, active: np.ndarray) -> tuple[int, int, int]:
    """(TP, FP, FN) of per-frame pressed key sets vs. sounding keys.

    ``pred_keys``: T x F pressed key per tip (-1 none); ``active``: T x 88 bool.
    """
    T = active.shape[0]
    pred = np.zeros_like(active, dtype=bool)
    t_idx, f_idx = np.nonzero(pred_keys >= 0)
    pred[t_idx, pred_keys[t_idx, f_idx]] = True
    tp = int((pred & active).sum())
    return tp, int((pred & ~active).sum()), int((~pred & active).sum())


def frame_level_f1(pred_keys: np.ndarray, active: np.ndarray) -> tuple[float, float, float]:
    tp, fp, fn = frame_level_counts(pred_keys, active)
    return f1_from_counts(tp, tp + fp, tp + fn)


def position_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(MPJPE, fingertip error) in mm. Accepts T x 21 x 3 or T x 5 x 3 (tips only)."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError(f"expected matching T x J x 3 arrays, got {pred.shape} and {gt.shape}")
    d = np.linalg.norm(pred - gt, axis=-1)
    tips = d[:, TIP_JOINTS] if pred.shape[1] == 21 else d
    return float(d.mean()), float(tips.mean())


def _accel(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x[2:] - 2 * x[1:-1] + x[:-2], axis=-1)


def accel_ratio(pred: np.ndarray, gt: np.ndarray) -> Optional[float]:
    """Mean predicted second-difference magnitude over the ground truth's; None when undefined."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    if pred.shape[0] < 3:
        raise ValueError("acceleration needs at least 3 frames")
    if pred.ndim == 2:
        pred, gt = pred[:, None], gt[:, None]
    denom = _accel(gt).mean()
    if denom == 0:
        return None
    return float(_accel(pred).mean() / denom)


# --------------------------------------------------------------------------
# Reports


@dataclass
class PieceCounts:
    """Additive per-piece tallies so corpus aggregation is order independent."""
    name: str
    group: str = "all"
    matched: int = 0
    n_pred: int = 0
    n_gt: int = 0
    joint_err_sum: float = 0.0
    joint_count: int = 0
    tip_err_sum: float = 0.0
    tip_count: int = 0
    accel: dict = field(default_factory=dict)  # group -> [pred_sum, gt_sum, count]


def accel_sums(pred: np.ndarray, gt: np.ndarray) -> list:
    a, b = _accel(np.asarray(pred, float)), _accel(np.asarray(gt, float))
    return [float(a.sum()), float(b.sum()), int(a.size)]


def piece_counts(name: str, pred_events: Sequence[PressEvent], notes: Sequence[NoteEvent],
                 pred_pose: Optional[dict] = None, gt_pose: Optional[dict] = None, group: str = "all",
                 onset_tol_ms: float = 100.0, fps: Fraction = FPS) -> PieceCounts:
    """Tally F1 and position statistics for one piece.

    ``pred_pose``/``gt_pose`` map hand -> T x 21 x 3 (or T x 5 x 3).
    """
    r = key_contact_f1(pred_events, notes, fps, onset_tol_ms)
    pc = PieceCounts(name, group, r.matched, r.n_pred, r.n_gt)
    if pred_pose and gt_pose:
        acc = defaultdict(lambda: [0.0, 0.0, 0])
        for hand in sorted(pred_pose):
            p, g = np.asarray(pred_pose[hand], float), np.asarray(gt_pose[hand], float)
            d = np.linalg.norm(p - g, axis=-1)
            pc.joint_err_sum += float(d.sum())
            pc.joint_count += d.size
            tips = d[:, TIP_JOINTS] if p.shape[1] == 21 else d
            pc.tip_err_sum += float(tips.sum())
            pc.tip_count += tips.size
            groups = {"fingertip": (p[:, TIP_JOINTS], g[:, TIP_JOINTS]) if p.shape[1] == 21 else (p, g)}
            if p.shape[1] == 21:
                groups["wrist"] = (p[:, :1], g[:, :1])
                groups["full"] = (p, g)
            for gname, (pp, gg) in groups.items():
                for key in (f"{hand}/{gname}", gname):
                    s = accel_sums(pp, gg)
                    acc[key] = [acc[key][0] + s[0], acc[key][1] + s[1], acc[key][2] + s[2]]
        pc.accel = dict(acc)
    return pc


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    mpjpe: Optional[float]
    fingertip_error: Optional[float]
    accel_ratio: dict
    groups: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _summarise(items: Sequence[PieceCounts]) -> dict:
    matched = sum(i.matched for i in items)
    n_pred = sum(i.n_pred for i in items)
    n_gt = sum(i.n_gt for i in items)
    p, r, f = f1_from_counts(matched, n_pred, n_gt)
    jc = sum(i.joint_count for i in items)
    tc = sum(i.tip_count for i in items)
    acc = defaultdict(lambda: [0.0, 0.0])
    for i in items:
        for k, (a, b, _) in i.accel.items():
            acc[k][0] += a
            acc[k][1] += b
    ratios = {k: (a / b if b > 0 else None) for k, (a, b) in sorted(acc.items())}
    return dict(precision=p, recall=r, f1=f,
                mpjpe=sum(i.joint_err_sum for i in items) / jc if jc else None,
                fingertip_error=sum(i.tip_err_sum for i in items) / tc if tc else None,
                accel_ratio=ratios, counts=dict(matched=matched, n_pred=n_pred, n_gt=n_gt))


def aggregate(items: Iterable[PieceCounts], config: Optional[dict] = None) -> MetricsReport:
    """Micro-averaged report over pieces, with a per-group breakdown."""
    items = sorted(items, key=lambda i: i.name)
    top = _summarise(items)
    groups = defaultdict(list)
    for i in items:
        groups[i.group].append(i)
    breakdown = {g: _summarise(v) for g, v in sorted(groups.items())}
    return MetricsReport(top["precision"], top["recall"], top["f1"], top["mpjpe"], top["fingertip_error"],
                         top["accel_ratio"], breakdown, dict(config or {}), top["counts"])
