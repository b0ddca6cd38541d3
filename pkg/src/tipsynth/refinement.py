"""Stage 2: residual refinement of fingertip trajectories.

Two cascaded transformer refiners (fingering only, then fingering + MIDI
features), each followed by residual clamping and hard geometric masking,
then press-masked temporal smoothing.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.ndimage import uniform_filter1d
from torch import nn
import torch.nn.functional as F

from .keyboard import NUM_KEYS, KeyboardGeometry
from .neural.blocks import FiLMGenerator, TemporalResNet, TransformerEncoder, film, sinusoidal_encoding
from .score import FPS, FrameGrid, NoteEvent

POS_SCALE = 50.0  # mm per network unit
MIDI_FEATURE_DIM = 452
FINGER_FEATURE_DIM = 15
ONSET_TAU = 0.1     # s, decay of onset/offset proximity ramps
ANTICIPATION_TAU = 0.25  # s, rise of upcoming-onset ramps
MIRROR = np.array([1.0, -1.0, 1.0])


@dataclass(frozen=True)
class ResidualBounds:
    fingertip_clamp: float = 80.0
    wrist_clamp: float = 50.0

    def __post_init__(self):
        if not (self.fingertip_clamp > 0 and self.wrist_clamp > 0):
            raise ValueError("clamp bounds must be positive")


# --------------------------------------------------------------------------
# Conditioning features


def midi_features(events: Sequence[NoteEvent], grid: FrameGrid) -> np.ndarray:
    """T x 452 raw MIDI feature track.

    Blocks of 88 per-pitch columns: sounding flag, velocity/127, decay since
    the latest onset, decay since the latest release, rise toward the next
    onset. Then 12 global columns: polyphony/10, mean and max sounding
    velocity, onsets in frame/4, decay since any onset, rise toward any
    onset, past and future inter-onset interval (s, /2, capped at 1),
    sounding pitch centroid and range (/87), onsets in the past and next
    second (/10).
    """
    T = grid.frame_count
    fps = float(grid.fps)
    frames = np.arange(T)
    active = np.zeros((T, NUM_KEYS))
    vel = np.zeros((T, NUM_KEYS))
    onset_ramp = np.zeros((T, NUM_KEYS))
    offset_ramp = np.zeros((T, NUM_KEYS))
    ahead_ramp = np.zeros((T, NUM_KEYS))
    onset_frames = []
    for n in events:
        lo, hi = grid.frame_span(n.onset, n.offset)
        o = grid.frame_of(n.onset)
        if lo <= hi:
            active[lo:hi + 1, n.key] = 1.0
            vel[lo:hi + 1, n.key] = np.maximum(vel[lo:hi + 1, n.key], n.velocity / 127.0)
        if 0 <= o < T:
            onset_frames.append(o)
        if o < T:
            s = max(o, 0)
            onset_ramp[s:, n.key] = np.maximum(onset_ramp[s:, n.key], np.exp(-(frames[s:] - o) / (ONSET_TAU * fps)))
            e = min(o + 1, T)
            ahead_ramp[:e, n.key] = np.maximum(ahead_ramp[:e, n.key], np.exp(-(o - frames[:e]) / (ANTICIPATION_TAU * fps)))
        off = grid.frame_of(n.offset)
        if off < T:
            s = max(off, 0)
            offset_ramp[s:, n.key] = np.maximum(offset_ramp[s:, n.key], np.exp(-(frames[s:] - off) / (ONSET_TAU * fps)))

    g = np.zeros((T, 12))
    poly = active.sum(axis=1)
    g[:, 0] = poly / 10.0
    with np.errstate(invalid="ignore", divide="ignore"):
        g[:, 1] = np.where(poly > 0, vel.sum(axis=1) / np.maximum(poly, 1), 0.0)
    g[:, 2] = vel.max(axis=1)
    onsets = np.array(sorted(set(onset_frames)), dtype=int)
    counts = np.bincount(np.asarray(onset_frames, dtype=int), minlength=T)[:T] if onset_frames else np.zeros(T)
    g[:, 3] = counts / 4.0
    g[:, 4] = onset_ramp.max(axis=1)
    g[:, 5] = ahead_ramp.max(axis=1)
    if onsets.size:
        idx_prev = np.searchsorted(onsets, frames, side="right") - 1  # latest onset <= t
        idx_next = np.searchsorted(onsets, frames, side="right")      # first onset > t
        for t in range(T):
            i = idx_prev[t]
            if i >= 1:
                g[t, 6] = min((onsets[i] - onsets[i - 1]) / fps / 2.0, 1.0)
            j = idx_next[t]
            if j + 1 < onsets.size:
                g[t, 7] = min((onsets[j + 1] - onsets[j]) / fps / 2.0, 1.0)
        sec = int(round(fps))
        csum = np.concatenate([[0], np.cumsum(counts)])
        g[:, 10] = (csum[frames + 1] - csum[np.maximum(frames + 1 - sec, 0)]) / 10.0
        g[:, 11] = (csum[np.minimum(frames + 1 + sec, T)] - csum[frames + 1]) / 10.0
    keys = np.arange(NUM_KEYS)
    for t in np.flatnonzero(poly):
        ks = keys[active[t] > 0]
        g[t, 8] = ks.mean() / 87.0
        g[t, 9] = (ks.max() - ks.min()) / 87.0
    out = np.concatenate([active, vel, onset_ramp, offset_ramp, ahead_ramp, g], axis=1)
    assert out.shape[1] == MIDI_FEATURE_DIM
    return out.astype(np.float32)


def finger_features(hand_keys: np.ndarray, geom: KeyboardGeometry, center_y: float,
                    sign: float = 1.0) -> np.ndarray:
    """T x 15: per finger a press flag, pressed-key centre Y (relative, scaled) and key colour.

    ``sign = -1`` expresses key positions in a Y-mirrored frame; ``center_y``
    is given in that same frame.
    """
    pressed = hand_keys >= 0
    safe = np.where(pressed, hand_keys, 0)
    y = np.where(pressed, (sign * geom.y_centers[safe] - center_y) / POS_SCALE, 0.0)
    black = np.where(pressed, geom.is_black(safe).astype(float), 0.0)
    return np.concatenate([pressed.astype(float), y, black], axis=1).astype(np.float32)


# --------------------------------------------------------------------------
# Masking, clamping, loss


def apply_geometric_mask(residuals: np.ndarray, press_mask: np.ndarray) -> np.ndarray:
    """Zero the Y and Z residual components wherever a finger is pressing."""
    out = np.array(residuals, dtype=float, copy=True)
    out[..., 1:][np.asarray(press_mask, dtype=bool)] = 0.0
    return out


def clamp_residual(residuals: np.ndarray, bound: float) -> np.ndarray:
    return np.clip(residuals, -bound, bound)


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    sq = (v * v).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def _masked_mean(x: torch.Tensor, valid: Optional[torch.Tensor]) -> torch.Tensor:
    if valid is None:
        return x.mean()
    w = valid.to(x.dtype)
    while w.ndim < x.ndim:
        w = w.unsqueeze(-1)
    w = w.expand_as(x)
    return (x * w).sum() / w.sum().clamp_min(1.0)


def refine_loss(pred, gt, lambda_pos: float = 1.0, lambda_vel: float = 0.5,
                fps: float = float(FPS), valid=None) -> torch.Tensor:
    """Mean position L2 plus weighted mean L2 of forward-difference velocity (mm/s) error.

    ``pred``/``gt`` are (..., T, J, 3); ``valid`` masks frames (..., T).
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    v = None if valid is None else torch.as_tensor(valid, dtype=torch.bool)
    pos = _masked_mean(_safe_norm(pred - gt), v)
    T = pred.shape[-3]
    if T < 2:
        return lambda_pos * pos
    dp = (pred[..., 1:, :, :] - pred[..., :-1, :, :]) * fps
    dg = (gt[..., 1:, :, :] - gt[..., :-1, :, :]) * fps
    vv = None if v is None else (v[..., 1:] & v[..., :-1])
    vel = _masked_mean(_safe_norm(dp - dg), vv)
    return lambda_pos * pos + lambda_vel * vel


# --------------------------------------------------------------------------
# Networks


@dataclass
class RefineNetConfig:
    d_model: int = 64
    depth: int = 4
    heads: int = 8
    ff_mult: int = 2
    cond_dim: int = 0          # 0 for Stage 2.1, MIDI_FEATURE_DIM for Stage 2.2
    fusion: str = "film"       # "film" or "concat"
    cond_hidden: int = 64

    def __post_init__(self):
        if self.fusion not in ("film", "concat"):
            raise ValueError(f"unknown fusion {self.fusion!r}")


class RefineNet(nn.Module):
    """Predicts a T x 5 x 3 fingertip residual (mm) from trajectory + fingering (+ MIDI)."""

    def __init__(self, cfg: RefineNetConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = 15 + FINGER_FEATURE_DIM
        if cfg.cond_dim and cfg.fusion == "concat":
            self.cond_proj = nn.Linear(cfg.cond_dim, cfg.cond_hidden)
            in_dim += cfg.cond_hidden
        self.in_proj = nn.Linear(in_dim, cfg.d_model)
        self.encoder = TransformerEncoder(cfg.d_model, cfg.depth, cfg.heads, cfg.ff_mult)
        if cfg.cond_dim and cfg.fusion == "film":
            self.film = FiLMGenerator(cfg.cond_dim, cfg.d_model, cfg.cond_hidden, groups=cfg.depth + 1)
        self.head = nn.Linear(cfg.d_model, 15)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, pos, fingers, cond=None, valid=None):
        B, T, _ = pos.shape
        parts = [pos, fingers]
        use_cond = self.cfg.cond_dim and cond is not None
        if use_cond and self.cfg.fusion == "concat":
            parts.append(F.gelu(self.cond_proj(cond)))
        h = self.in_proj(torch.cat(parts, dim=-1)) + sinusoidal_encoding(T, self.cfg.d_model)
        modulation = None
        if use_cond and self.cfg.fusion == "film":
            modulation = self.film(cond)
            h = film(h, *modulation[0])
            modulation = modulation[1:]
        h = self.encoder(h, valid, modulation)
        return self.head(h).reshape(B, T, 5, 3) * POS_SCALE


def refine_torch(model: RefineNet, traj: torch.Tensor, fingers: torch.Tensor, cond, valid,
                 press: torch.Tensor, bound: float, mask: bool = True):
    """Differentiable cascade step used for training; returns (refined, clamped residual)."""
    center = _masked_center(traj, valid)
    pos = ((traj - center) / POS_SCALE).reshape(*traj.shape[:2], 15)
    res = torch.clamp(model(pos, fingers, cond, valid), -bound, bound)
    if mask:
        keep = torch.ones_like(res)
        keep[..., 1:] = torch.where(press[..., None], 0.0, 1.0).expand(*press.shape, 2)
        res = res * keep
    return traj + res, res


def _masked_center(traj: torch.Tensor, valid) -> torch.Tensor:
    if valid is None:
        return traj.mean(dim=(1, 2), keepdim=True)
    w = valid.to(traj.dtype)[:, :, None, None]
    return (traj * w).sum(dim=(1, 2), keepdim=True) / (w.sum(dim=(1, 2), keepdim=True) * traj.shape[2])


@dataclass
class RefineOutput:
    trajectory: np.ndarray
    residual: np.ndarray   # clamped (pre-mask) residual, mm
    raw_residual: np.ndarray


class InferenceError(RuntimeError):
    pass


def refine_stage(traj: np.ndarray, hand_keys: np.ndarray, geom: KeyboardGeometry,
                 model: Optional[RefineNet], midi: Optional[np.ndarray] = None,
                 bounds: ResidualBounds = ResidualBounds(), mask: bool = True,
                 valid: Optional[np.ndarray] = None,
                 raw_residual: Optional[np.ndarray] = None, mirror: bool = False) -> RefineOutput:
    """One refinement step: ``traj + mask(clamp(residual))``.

    ``raw_residual`` bypasses the network (used to probe the clamp/mask path).
    A missing model means a zero residual. ``mirror`` runs the network in a
    Y-mirrored frame (left hand through a right-hand model).
    """
    traj = np.asarray(traj, dtype=float)
    T = traj.shape[0]
    valid = np.ones(T, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    press = hand_keys >= 0
    if raw_residual is None:
        if model is None:
            raw_residual = np.zeros_like(traj)
        else:
            m = MIRROR if mirror else np.ones(3)
            center = traj[valid].mean(axis=(0, 1)) * m
            pos = ((traj * m - center) / POS_SCALE).reshape(T, 15).astype(np.float32)
            fing = finger_features(hand_keys, geom, center[1], m[1])
            with torch.no_grad():
                cond = None
                if model.cfg.cond_dim and midi is not None:
                    cond = torch.from_numpy(np.asarray(midi, dtype=np.float32))[None]
                out = model(torch.from_numpy(pos)[None], torch.from_numpy(fing)[None], cond,
                            torch.from_numpy(valid)[None])
            raw_residual = out[0].numpy().astype(float) * m
    if not np.all(np.isfinite(raw_residual)):
        raise InferenceError("refinement network produced non-finite residuals")
    clamped = clamp_residual(raw_residual, bounds.fingertip_clamp)
    applied = apply_geometric_mask(clamped, press) if mask else clamped
    return RefineOutput(traj + applied, clamped, raw_residual)


# --------------------------------------------------------------------------
# Smoothing


class SmootherNet(nn.Module):
    """Per-channel learned temporal filter: a residual CNN over one coordinate track."""

    def __init__(self, channels: int = 16, blocks: int = 3, kernel: int = 9):
        super().__init__()
        self.config = {"channels": channels, "blocks": blocks, "kernel": kernel}
        self.inp = nn.Conv1d(1, channels, kernel, padding=kernel // 2)
        self.body = TemporalResNet(channels, blocks, kernel)
        self.out = nn.Conv1d(channels, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):  # (N, T) tracks, already centred and scaled
        h = self.inp(x[:, None, :])
        h = self.body(h.transpose(1, 2)).transpose(1, 2)
        return x + self.out(F.gelu(h))[:, 0]


def apply_smoother_net(net: SmootherNet, traj: np.ndarray) -> np.ndarray:
    T = traj.shape[0]
    tracks = traj.reshape(T, -1).T
    ref = tracks.mean(axis=1, keepdims=True)
    with torch.no_grad():
        y = net(torch.from_numpy(((tracks - ref) / POS_SCALE).astype(np.float32))).numpy().astype(float)
    return (y * POS_SCALE + ref).T.reshape(traj.shape)


def moving_average(traj: np.ndarray, radius: int) -> np.ndarray:
    """Symmetric moving average along time with edge replication; exact on constants."""
    traj = np.asarray(traj, dtype=float)
    ref = traj[:1]
    return ref + uniform_filter1d(traj - ref, size=2 * radius + 1, axis=0, mode="nearest")


def smooth_trajectory(traj: np.ndarray, press_mask: Optional[np.ndarray], window_radius: int = 4,
                      smoother: Optional[SmootherNet] = None) -> np.ndarray:
    """Temporal smoothing, then restore pre-smoothing Y/Z at pressed (t, finger)."""
    if window_radius < 1:
        raise ValueError("window_radius must be at least 1")
    traj = np.asarray(traj, dtype=float)
    out = apply_smoother_net(smoother, traj) if smoother is not None else moving_average(traj, window_radius)
    if press_mask is not None:
        pm = np.asarray(press_mask, dtype=bool)
        out[..., 1:][pm] = traj[..., 1:][pm]
    return out
