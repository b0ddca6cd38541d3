"""Blend overlapping window outputs into one full-length trajectory."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .score import FPS, WINDOW_LENGTH, WINDOW_STRIDE, Window, make_windows


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class StitchConfig:
    filter_order: int = 4
    cutoff_hz: float = 6.0
    seam_radius: int = 12
    fps: float = float(FPS)


def window_weights(window: Window) -> np.ndarray:
    """Raised-cosine weight over the window's valid span, peaking at its centre."""
    v = window.valid
    i = np.arange(v)
    return np.sin(np.pi * (i + 0.5) / v) ** 2


def blend_weights(windows: Sequence[Window], T: int) -> np.ndarray:
    """W x T normalised per-frame weights (zero where a window does not cover a frame)."""
    W = np.zeros((len(windows), T))
    for n, w in enumerate(windows):
        W[n, w.start:w.start + w.valid] = window_weights(w)
    return W / W.sum(axis=0, keepdims=True)


def seam_frames(windows: Sequence[Window], T: int) -> list[int]:
    """Interior frames where some window's coverage begins or ends."""
    s = set()
    for w in windows:
        for b in (w.start, w.start + w.valid):
            if 0 < b < T:
                s.add(b)
    return sorted(s)


def stitch_windows(outputs: Sequence[np.ndarray], windows: Sequence[Window], T: int,
                   press_mask: Optional[np.ndarray] = None, cfg: StitchConfig = StitchConfig(),
                   length: int = WINDOW_LENGTH, stride: int = WINDOW_STRIDE) -> np.ndarray:
    """Weighted blend of window outputs, then zero-phase low-pass filtering near seams.

    ``outputs[i]`` is (length, ...) for ``windows[i]``. Frames covered by a
    single window are copied exactly. ``press_mask`` (T x J) restores the
    blended Y/Z of pressed joints after seam filtering.
    """
    expected = make_windows(T, length, stride)
    if [(w.start, w.valid) for w in windows] != [(w.start, w.valid) for w in expected]:
        raise AssemblyError(f"windows do not match the stride-{stride} layout for T={T}")
    if len(outputs) != len(windows):
        raise AssemblyError("one output per window is required")
    shape = np.asarray(outputs[0]).shape[1:]
    if len(windows) == 1:
        return np.array(np.asarray(outputs[0])[:T], dtype=float)

    Wt = blend_weights(windows, T)
    base = np.empty((T,) + shape)
    filled = np.zeros(T, dtype=bool)
    for w, out in zip(windows, outputs):
        seg = np.asarray(out, dtype=float)[:w.valid]
        span = slice(w.start, w.start + w.valid)
        todo = ~filled[span]
        base[span][todo] = seg[todo]
        filled[span] = True
    acc = np.zeros((T,) + shape)
    for n, (w, out) in enumerate(zip(windows, outputs)):
        span = slice(w.start, w.start + w.valid)
        wt = Wt[n, span].reshape((-1,) + (1,) * len(shape))
        acc[span] += wt * (np.asarray(out, dtype=float)[:w.valid] - base[span])
    blended = base + acc

    sos = butter(cfg.filter_order, cfg.cutoff_hz, fs=cfg.fps, output="sos")
    filtered = sosfiltfilt(sos, blended, axis=0)
    near = np.zeros(T, dtype=bool)
    for s in seam_frames(windows, T):
        near[max(s - cfg.seam_radius, 0):min(s + cfg.seam_radius + 1, T)] = True
    out = blended.copy()
    out[near] = filtered[near]
    if press_mask is not None:
        pm = np.asarray(press_mask, dtype=bool) & near[:, None]
        out[..., 1:][pm] = blended[..., 1:][pm]
    return out
