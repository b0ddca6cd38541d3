"""Seeded synthetic performances: notes, fingerings and ground-truth hand motion.

Each hand plays phrases inside a five-white-key position (left hand in the
lower register, right hand above middle C). Fingertips rest on their key
during a note, hover in a hand-relative pose otherwise, and travel between
keys along lifted arcs whose height grows with note velocity. The wrist
trails the smoothed fingertip centroid; MCP joints are rigidly attached to
the wrist and PIP/DIP come from planar inverse kinematics with fixed bone
lengths.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .keyboard import NUM_KEYS, KeyboardGeometry, build_standard_keyboard, region_of
from .pose import NUM_JOINTS, TIP_JOINTS, WRIST
from .refinement import moving_average
from .score import FPS, FingeringGrid, FrameGrid, NoteEvent, TempoMap, parse_fingering, parse_midi, write_midi

logger = logging.getLogger(__name__)

HAND_SIGN = {"L": -1.0, "R": 1.0}  # direction of increasing finger index along Y
# hand-frame MCP offsets from the wrist (right hand; the left hand mirrors Y)
MCP_OFFSETS = np.array([[45.0, -35.0, -15.0], [85.0, -22.0, 0.0], [88.0, -3.0, 0.0],
                        [84.0, 15.0, -2.0], [76.0, 31.0, -6.0]])
# proximal, middle and distal phalanx lengths (thumb: metacarpal-free chain)
PHALANGES = np.array([[38.0, 32.0, 28.0], [40.0, 24.0, 20.0], [44.0, 28.0, 22.0],
                      [41.0, 26.0, 21.0], [33.0, 20.0, 18.0]])
DIP_COUPLING = 2.0 / 3.0
MAX_PIP_FLEXION = math.radians(100.0)

WHITE_CONTACT_X = np.array([25.0, 40.0, 45.0, 42.0, 30.0])
BLACK_CONTACT_X = 68.0
WHITE_PRESS_Z = -5.0
BLACK_PRESS_Z = 7.5
HOVER_X = WHITE_CONTACT_X - 6.0
HOVER_Z = 16.0
WRIST_OFFSET = np.array([-118.0, 0.0, 52.0])
APPROACH_S = 0.12
RELEASE_S = 0.10
HAND_SHIFT_S = 0.3
MAX_REACH_MM = 9 * 23.5


class CorpusError(RuntimeError):
    pass


@dataclass
class NoiseModel:
    jitter_sigma: float = 0.0      # mm, i.i.d. per joint coordinate and frame
    dropout_rate: float = 0.0      # fraction of frames starting a held (occluded) span
    press_error_rate: float = 0.0  # fraction of presses captured off-target

    def is_clean(self) -> bool:
        return self.jitter_sigma == 0 and self.dropout_rate == 0 and self.press_error_rate == 0


@dataclass
class SyntheticCorpusSpec:
    n_pieces: int = 20
    length_range: tuple = (12.0, 20.0)    # seconds
    polyphony_range: tuple = (1, 2)       # simultaneous notes per hand
    tempo_range: tuple = (80.0, 132.0)    # beats per minute
    black_key_rate: float = 0.15
    noise: NoiseModel = field(default_factory=NoiseModel)
    split_ratios: tuple = (0.7, 0.15, 0.15)
    seed: int = 0
    max_retries: int = 10

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseModel(**self.noise)
        if self.n_pieces < 1:
            raise ValueError("n_pieces must be positive")
        if not (0 < self.length_range[0] <= self.length_range[1]):
            raise ValueError("invalid length range")
        if not (1 <= self.polyphony_range[0] <= self.polyphony_range[1] <= 3):
            raise ValueError("polyphony range must lie within 1..3")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ValueError("split ratios must be non-negative and sum to 1")

    def split_counts(self) -> tuple[int, int, int]:
        n_train = int(round(self.n_pieces * self.split_ratios[0]))
        n_val = int(round(self.n_pieces * self.split_ratios[1]))
        return n_train, n_val, self.n_pieces - n_train - n_val


@dataclass
class Piece:
    name: str
    split: str
    notes: list
    fingering: FingeringGrid
    joints: dict           # hand -> T x 21 x 3 captured (noisy) motion
    clean_joints: dict     # hand -> T x 21 x 3 noise-free motion
    tempo: float = 120.0

    @property
    def T(self) -> int:
        return self.fingering.T

    @property
    def grid(self) -> FrameGrid:
        return FrameGrid(self.T)

    def tips(self, clean: bool = False) -> dict:
        src = self.clean_joints if clean else self.joints
        return {h: v[:, TIP_JOINTS] for h, v in src.items()}

    def wrist(self, clean: bool = False) -> dict:
        src = self.clean_joints if clean else self.joints
        return {h: v[:, WRIST] for h, v in src.items()}


@dataclass
class Corpus:
    spec: SyntheticCorpusSpec
    pieces: list

    def split(self, name: str) -> list:
        return [p for p in self.pieces if p.split == name]

    # -- persistence ----------------------------------------------------

    def save(self, root) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for p in self.pieces:
            (root / f"{p.name}.mid").write_bytes(write_midi(p.notes))
            (root / f"{p.name}.csv").write_text(p.fingering.to_csv())
            np.savez(root / f"{p.name}.npz", **{f"joints_{h}": v for h, v in p.joints.items()},
                     **{f"clean_{h}": v for h, v in p.clean_joints.items()})
            entries.append({"piece": p.name, "split": p.split, "frames": p.T, "tempo": p.tempo,
                            "midi": f"{p.name}.mid", "fingering": f"{p.name}.csv",
                            "trajectory": f"{p.name}.npz"})
        spec = asdict(self.spec)
        (root / "manifest.json").write_text(json.dumps({"spec": spec, "pieces": entries}, indent=1))
        return root / "manifest.json"

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        doc = json.loads((root / "manifest.json").read_text())
        spec_doc = doc.get("spec", {})
        spec = SyntheticCorpusSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in spec_doc.items()})
        pieces = []
        for e in doc["pieces"]:
            notes = parse_midi((root / e["midi"]).read_bytes())
            fing = parse_fingering((root / e["fingering"]).read_text(), e["frames"])
            arrs = np.load(root / e["trajectory"])
            joints = {h: arrs[f"joints_{h}"] for h in ("L", "R") if f"joints_{h}" in arrs}
            clean = {h: arrs[f"clean_{h}"] for h in ("L", "R") if f"clean_{h}" in arrs} or joints
            pieces.append(Piece(e["piece"], e["split"], notes, fing, joints, clean, e.get("tempo", 120.0)))
        return cls(spec, pieces)


# --------------------------------------------------------------------------
# Score generation


@dataclass
class _Contact:
    finger: int
    key: int
    start: int      # first frame
    end: int        # last frame (inclusive)
    point: np.ndarray
    velocity: int


_TMAP = TempoMap(480)


def _quantise(t: float) -> float:
    """Snap a time to the MIDI tick grid so files round-trip exactly."""
    return _TMAP.to_seconds(_TMAP.to_ticks(t))


def _white_keys() -> np.ndarray:
    from .keyboard import is_black_key
    return np.array([k for k in range(NUM_KEYS) if not is_black_key(k)])


WHITES = _white_keys()
MIDDLE_C_WHITE = int(np.flatnonzero(WHITES == 39)[0])


def _finger_key(hand: str, base: int, finger: int, black: bool) -> int:
    off = finger if hand == "R" else 4 - finger
    k = int(WHITES[base + off])
    if black:
        cand = k + 1 if hand == "R" else k - 1
        from .keyboard import is_black_key
        if 0 <= cand < NUM_KEYS and is_black_key(cand):
            return cand
    return k


def _hand_notes(hand: str, length: float, beat: float, spec: SyntheticCorpusSpec,
                rng: np.random.Generator) -> list[tuple]:
    """(onset, duration, key, finger, velocity, base) tuples for one hand."""
    lo, hi = (5, MIDDLE_C_WHITE - 5) if hand == "L" else (MIDDLE_C_WHITE, len(WHITES) - 8)
    base = int(rng.integers(lo, hi + 1))
    t = float(rng.uniform(0.0, 0.5))
    out = []
    prev_keys: set = set()
    prev_finger = -1
    max_poly = spec.polyphony_range[1]
    while t < length - 0.4:
        n_notes = int(rng.integers(4, 10))
        for _ in range(n_notes):
            ioi = beat * float(rng.choice([0.5, 1.0, 1.0, 1.5, 2.0]))
            if t + ioi > length - 0.1:
                break
            dur = ioi - max(0.15 * ioi, 0.05)
            vel = int(rng.integers(35, 115))
            choices = [f for f in range(5) if f != prev_finger]
            keys_now = []
            for _ in range(20):
                f = int(rng.choice(choices))
                black = f in (1, 2, 3) and rng.random() < spec.black_key_rate
                k = _finger_key(hand, base, f, black)
                if k not in prev_keys:
                    keys_now.append((k, f))
                    break
            if not keys_now:
                t += ioi
                continue
            if max_poly >= 2 and rng.random() < 0.25:
                f0 = keys_now[0][1]
                others = [g for g in range(5) if abs(g - f0) >= 2]
                g = int(rng.choice(others))
                k2 = _finger_key(hand, base, g, False)
                if k2 not in prev_keys and k2 != keys_now[0][0]:
                    keys_now.append((k2, g))
            on = _quantise(t)
            d = _quantise(t + dur) - on
            for k, f in keys_now:
                out.append((on, d, k, f, vel, base))
            prev_keys = {k for k, _ in keys_now}
            prev_finger = keys_now[0][1]
            t += ioi
        t += beat * float(rng.choice([0.5, 1.0, 2.0]))
        base = int(np.clip(base + rng.integers(-3, 4), lo, hi))
    return out


def _check_reach(notes: list, geom: KeyboardGeometry) -> bool:
    by_onset: dict = {}
    for on, _, k, _, _, _ in notes:
        by_onset.setdefault(on, []).append(geom.y_centers[k])
    return all(max(ys) - min(ys) <= MAX_REACH_MM for ys in by_onset.values())


# --------------------------------------------------------------------------
# Motion


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _hand_y_track(contacts: list, T: int, fps: float, geom: KeyboardGeometry,
                  hand: str, bases: dict) -> np.ndarray:
    """Lateral hand position: phrase-centre Y with smooth shifts ahead of each phrase."""
    times = np.arange(T) / fps
    order = sorted(bases.items())
    centre = lambda b: float(np.mean(geom.y_centers[WHITES[b:b + 5]]))
    y = np.full(T, centre(order[0][1]) if order else geom.y_centers[39])
    for (t0, b_prev), (t1, b) in zip(order, order[1:]):
        if b != b_prev:
            y += (centre(b) - centre(b_prev)) * _smoothstep((times - (t1 - HAND_SHIFT_S)) / HAND_SHIFT_S)
    return y


def _finger_track(contacts: list, free: np.ndarray, fps: float) -> np.ndarray:
    """T x 3 path of one fingertip through its contacts."""
    T = free.shape[0]
    out = free.copy()
    cs = sorted(contacts, key=lambda c: c.start)
    for c in cs:
        out[c.start:c.end + 1] = c.point
    times = np.arange(T) / fps
    A, R = APPROACH_S, RELEASE_S
    for i in range(len(cs) + 1):
        prev = cs[i - 1] if i > 0 else None
        nxt = cs[i] if i < len(cs) else None
        lo = prev.end + 1 if prev else 0
        hi = nxt.start if nxt else T
        if lo >= hi:
            continue
        t = times[lo:hi]
        te = (prev.end + 1) / fps if prev else -np.inf
        ts = nxt.start / fps if nxt else np.inf
        seg = free[lo:hi].copy()
        if prev is not None and nxt is not None and ts - te <= A + R:
            u = np.clip((t - te) / (ts - te), 0.0, 1.0)
            w = _smoothstep(u)[:, None]
            seg = (1 - w) * prev.point + w * nxt.point
            h = (8.0 + 16.0 * nxt.velocity / 127.0) * min(1.0, (ts - te) / (A + R))
            seg[:, 2] += h * np.sqrt(np.sin(np.pi * u))
        else:
            if nxt is not None:
                u = np.clip((t - (ts - A)) / A, 0.0, 1.0)
                w = _smoothstep(u)[:, None]
                lift = (4.0 + 10.0 * nxt.velocity / 127.0) * np.sin(np.pi * u)
                seg = (1 - w) * seg + w * nxt.point
                seg[:, 2] += lift * (u > 0)
            if prev is not None:
                u = np.clip((t - te) / R, 0.0, 1.0)
                w = 1.0 - _smoothstep(u)[:, None]
                lift = (3.0 + 6.0 * prev.velocity / 127.0) * np.sin(np.pi * u)
                seg = (1 - w) * seg + w * prev.point
                seg[:, 2] += lift * (u < 1)
        out[lo:hi] = seg
    return out


def solve_finger_ik(mcp: np.ndarray, tip: np.ndarray, bones: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """PIP and DIP (T x 3 each) for a planar chain with DIP flexion = 2/3 PIP flexion.

    The chain bends in the vertical plane through MCP and TIP with knuckles
    above the MCP->TIP line. Unreachable targets scale the chain uniformly.
    Returns (pip, dip, number of frames that needed scaling).
    """
    d = tip - mcp
    D = np.linalg.norm(d, axis=-1)
    e1 = d / np.maximum(D, 1e-9)[:, None]
    up = np.array([0.0, 0.0, 1.0])
    e2 = up - (e1 @ up)[:, None] * e1
    n2 = np.linalg.norm(e2, axis=-1)
    fallback = n2 < 1e-6
    e2[fallback] = np.array([1.0, 0.0, 0.0])
    e2 /= np.linalg.norm(e2, axis=-1, keepdims=True)
    l1, l2, l3 = bones

    def end(theta):
        a2, a3 = -theta, -theta * (1 + DIP_COUPLING)
        x = l1 + l2 * np.cos(a2) + l3 * np.cos(a3)
        y = l2 * np.sin(a2) + l3 * np.sin(a3)
        return x, y

    lo = np.zeros_like(D)
    hi = np.full_like(D, MAX_PIP_FLEXION)
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        x, y = end(mid)
        too_long = np.hypot(x, y) > D
        lo = np.where(too_long, mid, lo)
        hi = np.where(too_long, hi, mid)
    theta = 0.5 * (lo + hi)
    x, y = end(theta)
    r = np.hypot(x, y)
    scale = D / np.maximum(r, 1e-9)
    scaled = int(np.sum(np.abs(scale - 1.0) > 1e-3))
    alpha = -np.arctan2(y, x)
    dirs = []
    for a in (alpha, alpha - theta, alpha - theta * (1 + DIP_COUPLING)):
        dirs.append(np.cos(a)[:, None] * e1 + np.sin(a)[:, None] * e2)
    pip = mcp + (scale * l1)[:, None] * dirs[0]
    dip = pip + (scale * l2)[:, None] * dirs[1]
    return pip, dip, scaled


def build_hand_joints(tips: np.ndarray, hand: str, hand_y: np.ndarray, fps: float) -> np.ndarray:
    """T x 21 x 3 pose from fingertip paths: smoothed-centroid wrist plus IK fingers."""
    T = tips.shape[0]
    centroid = moving_average(tips.mean(axis=1), 12)
    wrist = centroid + WRIST_OFFSET
    vy = np.abs(np.gradient(hand_y) * fps)
    wrist[:, 2] += np.minimum(0.02 * vy, 8.0)
    joints = np.empty((T, NUM_JOINTS, 3))
    joints[:, WRIST] = wrist
    mirror = np.array([1.0, HAND_SIGN[hand], 1.0])
    for f in range(5):
        base = 1 + 4 * f
        mcp = wrist + MCP_OFFSETS[f] * mirror
        pip, dip, _ = solve_finger_ik(mcp, tips[:, f], PHALANGES[f])
        joints[:, base] = mcp
        joints[:, base + 1] = pip
        joints[:, base + 2] = dip
        joints[:, base + 3] = tips[:, f]
    return joints


def reference_bone_lengths() -> np.ndarray:
    """The 20 skeletal bone lengths of the synthetic hand, in graph edge order."""
    out = []
    for f in range(5):
        out.append(np.linalg.norm(MCP_OFFSETS[f]))
        out.extend(PHALANGES[f])
    return np.array(out)


def _contact_point(key: int, finger: int, geom: KeyboardGeometry, rng: np.random.Generator) -> np.ndarray:
    spec = geom.key(key)
    half = (spec.y_max - spec.y_min) / 2 - 3.0
    y = spec.y_center + float(np.clip(rng.normal(0, 2.5), -half, half))
    if spec.is_black:
        x = float(np.clip(BLACK_CONTACT_X + rng.normal(0, 5), spec.x_min + 3, spec.x_min + 45))
        z = BLACK_PRESS_Z + float(rng.normal(0, 0.4))
    else:
        x = float(np.clip(WHITE_CONTACT_X[finger] + rng.normal(0, 5), 10.0, 52.0))
        z = WHITE_PRESS_Z + float(rng.normal(0, 0.7))
    return np.array([x, y, z])


def _motion(hand: str, contacts: list, bases: dict, T: int, geom: KeyboardGeometry) -> np.ndarray:
    fps = float(FPS)
    hand_y = _hand_y_track(contacts, T, fps, geom, hand, bases)
    tips = np.empty((T, 5, 3))
    for f in range(5):
        free = np.empty((T, 3))
        free[:, 0] = HOVER_X[f]
        free[:, 1] = hand_y + HAND_SIGN[hand] * (f - 2) * 23.5
        free[:, 2] = HOVER_Z
        tips[:, f] = _finger_track([c for c in contacts if c.finger == f], free, fps)
    return build_hand_joints(tips, hand, hand_y, fps)


def _apply_capture_noise(joints: np.ndarray, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    out = joints.copy()
    T = out.shape[0]
    if noise.dropout_rate > 0:
        for j in range(out.shape[1]):
            starts = np.flatnonzero(rng.random(T) < noise.dropout_rate)
            for s in starts:
                if s == 0:
                    continue
                n = int(rng.integers(3, 11))
                out[s:s + n, j] = out[s - 1, j]
    if noise.jitter_sigma > 0:
        out += rng.normal(0.0, noise.jitter_sigma, out.shape)
    return out


def _generate_piece(name: str, spec: SyntheticCorpusSpec, geom: KeyboardGeometry,
                    rng: np.random.Generator) -> Piece:
    # capture noise draws from its own stream so clean motion ignores the noise settings
    noise_rng = np.random.default_rng(int(rng.integers(0, 2**63 - 1)))
    length = float(rng.uniform(*spec.length_range))
    tempo = float(rng.uniform(*spec.tempo_range))
    beat = 60.0 / tempo
    grid = FrameGrid.for_duration(length)
    T = grid.frame_count
    for attempt in range(spec.max_retries):
        hand_notes = {h: _hand_notes(h, length, beat, spec, rng) for h in ("L", "R")}
        if all(_check_reach(v, geom) for v in hand_notes.values()):
            break
        logger.info("piece %s: fingering exceeds hand reach, regenerating (attempt %d)", name, attempt + 1)
    else:
        raise CorpusError(f"could not generate a playable fingering for {name}")

    values = np.zeros((T, NUM_KEYS), dtype=np.int8)
    notes, clean, noisy = [], {}, {}
    for hand in ("L", "R"):
        contacts, perturbed, bases = [], [], {}
        for on, dur, k, f, vel, base in hand_notes[hand]:
            notes.append(NoteEvent(on, k, vel, dur))
            lo, hi = grid.frame_span(on, on + dur)
            if lo > hi:
                continue
            values[lo:hi + 1, k] = (1 if hand == "L" else 6) + f
            bases.setdefault(on, base)
            point = _contact_point(k, f, geom, rng)
            contacts.append(_Contact(f, k, lo, hi, point, vel))
            p2 = point.copy()
            if noise_rng.random() < spec.noise.press_error_rate:
                if noise_rng.random() < 0.5:
                    p2[2] += float(noise_rng.uniform(3.0, 8.0))
                else:
                    p2[1] += float(noise_rng.choice([-1, 1]) * noise_rng.uniform(5.0, 10.0))
            perturbed.append(_Contact(f, k, lo, hi, p2, vel))
        clean[hand] = _motion(hand, contacts, bases, T, geom)
        observed = clean[hand] if spec.noise.press_error_rate == 0 else _motion(hand, perturbed, bases, T, geom)
        noisy[hand] = _apply_capture_noise(observed, spec.noise, noise_rng)
    notes.sort()
    return Piece(name, "", notes, FingeringGrid(values), noisy, clean, tempo)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, geom: Optional[KeyboardGeometry] = None) -> Corpus:
    """Deterministic corpus for a given SyntheticCorpusSpec, seed included."""
    geom = geom or build_standard_keyboard()
    root = np.random.default_rng(spec.seed)
    seeds = root.integers(0, 2**63 - 1, size=spec.n_pieces)
    pieces = [_generate_piece(f"piece{i:03d}", spec, geom, np.random.default_rng(int(s)))
              for i, s in enumerate(seeds)]
    n_train, n_val, _ = spec.split_counts()
    order = root.permutation(spec.n_pieces)
    for rank, i in enumerate(order):
        pieces[i].split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return Corpus(spec, pieces)
