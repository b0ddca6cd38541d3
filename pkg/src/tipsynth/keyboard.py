"""88-key piano geometry in piano-aligned millimetre coordinates.

Axes: X runs along key depth (0 at the front edge of the white keys,
increasing into the instrument), Y runs along the keyboard (key identity,
increasing with pitch), Z is height with the white-key rest surface at 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

NUM_KEYS = 88
BLACK_PITCH_CLASSES = frozenset({1, 3, 6, 8, 10})
# half-open [lo, hi) key ranges of the eight wrist-offset regions
REGION_BOUNDS = (0, 15, 25, 35, 45, 55, 65, 75, 88)
NUM_REGIONS = len(REGION_BOUNDS) - 1


class KeyboardConfigError(ValueError):
    pass


class ContractViolation(ValueError):
    """A precondition of a geometry query was not met."""


def is_black_key(index: int) -> bool:
    return (index + 9) % 12 in BLACK_PITCH_CLASSES


@dataclass(frozen=True)
class KeySpec:
    index: int
    is_black: bool
    y_min: float
    y_max: float
    x_min: float
    x_max: float
    rest_z: float

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2, self.rest_z])

    @property
    def y_center(self) -> float:
        return (self.y_min + self.y_max) / 2


@dataclass(frozen=True)
class PressThresholds:
    white_z: float = -1.19
    black_z: float = 10.38
    # informational only; detection uses the two calibrated planes above
    acoustic_trigger_depth: float = 8.0

    def validate(self, black_rest_z: float) -> None:
        if not (self.white_z < 0 < self.black_z < black_rest_z):
            raise KeyboardConfigError(
                f"thresholds must satisfy white_z < 0 < black_z < black rest ({black_rest_z}); "
                f"got white_z={self.white_z}, black_z={self.black_z}"
            )


@dataclass
class KeyboardConfig:
    white_key_width: float = 23.5
    white_key_length: float = 150.0
    black_key_width: float = 13.7
    black_key_length: float = 95.0
    black_rest_z: float = 12.5
    # per pitch-class lateral shift of black keys from the white-key seam (mm)
    black_offsets: dict = field(default_factory=dict)
    origin: tuple = (0.0, 0.0, 0.0)
    thresholds: PressThresholds = field(default_factory=PressThresholds)

    def validate(self) -> None:
        for name in ("white_key_width", "white_key_length", "black_key_width", "black_key_length"):
            if not getattr(self, name) > 0:
                raise KeyboardConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.black_key_length >= self.white_key_length:
            raise KeyboardConfigError("black keys must be shorter than white keys")
        if self.black_key_width >= self.white_key_width:
            raise KeyboardConfigError("black keys must be narrower than white keys")
        for pc, off in self.black_offsets.items():
            if int(pc) not in BLACK_PITCH_CLASSES:
                raise KeyboardConfigError(f"black offset given for non-black pitch class {pc}")
            if abs(off) + self.black_key_width / 2 >= self.white_key_width / 2:
                raise KeyboardConfigError(f"black offset {off} for pitch class {pc} makes black keys collide")
        self.thresholds.validate(self.black_rest_z)


class KeyboardGeometry:
    """Immutable key layout plus press thresholds.

    ``key_at`` uses Y intervals closed on the upper edge, ``(y_min, y_max]``,
    so a point on a shared boundary belongs to the lower-index key (key 0 also
    owns its lower edge). Black keys win over the white keys they overlap when
    the point lies within the black key's X depth.
    """

    def __init__(self, keys: Sequence[KeySpec], white_key_width: float,
                 origin=(0.0, 0.0, 0.0), thresholds: Optional[PressThresholds] = None):
        if len(keys) != NUM_KEYS:
            raise KeyboardConfigError(f"expected {NUM_KEYS} keys, got {len(keys)}")
        self.keys: tuple[KeySpec, ...] = tuple(keys)
        self.white_key_width = float(white_key_width)
        self.origin = np.asarray(origin, dtype=float)
        self.thresholds = thresholds or PressThresholds()
        self._check()
        self._y_min = np.array([k.y_min for k in self.keys])
        self._y_max = np.array([k.y_max for k in self.keys])
        self._x_min = np.array([k.x_min for k in self.keys])
        self._x_max = np.array([k.x_max for k in self.keys])
        self._black = np.array([k.is_black for k in self.keys])
        self._rest_z = np.array([k.rest_z for k in self.keys])
        self._white_idx = np.flatnonzero(~self._black)
        self._black_idx = np.flatnonzero(self._black)
        self.y_centers = (self._y_min + self._y_max) / 2
        self.press_z = np.where(self._black, self.thresholds.black_z, self.thresholds.white_z)

    def _check(self) -> None:
        for i, k in enumerate(self.keys):
            if k.index != i:
                raise KeyboardConfigError(f"key {i} has index {k.index}")
            if not (k.y_min < k.y_max and k.x_min < k.x_max):
                raise KeyboardConfigError(f"key {i} has empty extent")
            if k.is_black != is_black_key(i):
                raise KeyboardConfigError(f"key {i} colour does not match its pitch class")
        for a, b in zip(self.keys, self.keys[1:]):
            if not (a.y_min < b.y_min and a.y_max < b.y_max):
                raise KeyboardConfigError(f"Y extents not increasing at keys {a.index}/{b.index}")
        whites = [k for k in self.keys if not k.is_black]
        for a, b in zip(whites, whites[1:]):
            if not np.isclose(a.y_max, b.y_min):
                raise KeyboardConfigError(f"white keys {a.index} and {b.index} do not tile")
        blacks = [k for k in self.keys if k.is_black]
        for a, b in zip(blacks, blacks[1:]):
            if a.y_max > b.y_min:
                raise KeyboardConfigError(f"black keys {a.index} and {b.index} overlap")
        self.thresholds.validate(max((k.rest_z for k in blacks), default=1.0))

    # -- queries ----------------------------------------------------------

    def key(self, index: int) -> KeySpec:
        return self.keys[index]

    def is_black(self, index) -> np.ndarray:
        return self._black[index]

    def key_at(self, point) -> Optional[int]:
        p = np.asarray(point, dtype=float)
        if not np.all(np.isfinite(p)):
            raise ContractViolation("point must be finite")
        k = int(self.keys_at(p[None, :])[0])
        return None if k < 0 else k

    def keys_at(self, points: np.ndarray) -> np.ndarray:
        """Vectorised ``key_at``; returns -1 where a point is off the keyboard."""
        pts = np.asarray(points, dtype=float).reshape(-1, points.shape[-1])
        x, y = pts[:, 0], pts[:, 1]
        out = np.full(len(pts), -1, dtype=np.int64)

        wy_min = self._y_min[self._white_idx]
        wy_max = self._y_max[self._white_idx]
        j = np.searchsorted(wy_max, y, side="left")
        jc = np.clip(j, 0, len(self._white_idx) - 1)
        lo_ok = (y > wy_min[jc]) | ((jc == 0) & (y == wy_min[0]))
        ok = (j < len(self._white_idx)) & lo_ok
        cand = self._white_idx[jc]
        ok &= (x >= self._x_min[cand]) & (x <= self._x_max[cand])
        out[ok] = cand[ok]

        by_max = self._y_max[self._black_idx]
        j = np.searchsorted(by_max, y, side="left")
        jc = np.clip(j, 0, len(self._black_idx) - 1)
        cand = self._black_idx[jc]
        hit = (j < len(self._black_idx)) & (y > self._y_min[cand])
        hit &= (x >= self._x_min[cand]) & (x <= self._x_max[cand])
        out[hit] = cand[hit]
        return out.reshape(np.asarray(points).shape[:-1])

    def is_pressed(self, point, key: KeySpec | int, thresholds: Optional[PressThresholds] = None) -> bool:
        spec = self.keys[key] if isinstance(key, (int, np.integer)) else key
        thr = thresholds or self.thresholds
        found = self.key_at(point)
        if found != spec.index:
            raise ContractViolation(f"point {tuple(point)} is over key {found}, not key {spec.index}")
        limit = thr.black_z if spec.is_black else thr.white_z
        return bool(point[2] <= limit)

    def pressed_keys(self, points: np.ndarray) -> np.ndarray:
        """Key index under each point if that point is pressed, else -1."""
        keys = self.keys_at(points)
        z = np.asarray(points)[..., 2]
        safe = np.where(keys >= 0, keys, 0)
        pressed = (keys >= 0) & (z <= self.press_z[safe])
        return np.where(pressed, keys, -1)

    @property
    def y_range(self) -> tuple[float, float]:
        return float(self._y_min.min()), float(self._y_max.max())

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "white_key_width": self.white_key_width,
            "origin": self.origin.tolist(),
            "thresholds": asdict(self.thresholds),
            "keys": [asdict(k) for k in self.keys],
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, doc: dict) -> "KeyboardGeometry":
        keys = [KeySpec(**k) for k in doc["keys"]]
        return cls(keys, doc["white_key_width"], doc.get("origin", (0, 0, 0)),
                   PressThresholds(**doc.get("thresholds", {})))

    @classmethod
    def from_json(cls, path) -> "KeyboardGeometry":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_standard_keyboard(config: Optional[KeyboardConfig] = None, **overrides) -> KeyboardGeometry:
    """Lay out A0..C8 with white keys tiling Y and black keys straddling seams."""
    cfg = config or KeyboardConfig()
    if overrides:
        cfg = KeyboardConfig(**{**asdict(cfg), **overrides})
        if isinstance(cfg.thresholds, dict):
            cfg.thresholds = PressThresholds(**cfg.thresholds)
    cfg.validate()
    ox, oy, _ = cfg.origin
    w = cfg.white_key_width
    keys = []
    n_white = 0
    for i in range(NUM_KEYS):
        if is_black_key(i):
            pc = (i + 9) % 12
            seam = oy + n_white * w + float(cfg.black_offsets.get(pc, cfg.black_offsets.get(str(pc), 0.0)))
            half = cfg.black_key_width / 2
            keys.append(KeySpec(i, True, seam - half, seam + half,
                                ox + cfg.white_key_length - cfg.black_key_length,
                                ox + cfg.white_key_length, cfg.black_rest_z))
        else:
            keys.append(KeySpec(i, False, oy + n_white * w, oy + (n_white + 1) * w,
                                ox, ox + cfg.white_key_length, 0.0))
            n_white += 1
    return KeyboardGeometry(keys, w, cfg.origin, cfg.thresholds)


def region_of(key: int) -> int:
    if not 0 <= key < NUM_KEYS:
        raise ValueError(f"key index {key} out of range 0..87")
    for r in range(NUM_REGIONS):
        if key < REGION_BOUNDS[r + 1]:
            return r
    raise AssertionError("unreachable")


def regions_of(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys)
    if keys.size and (keys.min() < 0 or keys.max() >= NUM_KEYS):
        raise ValueError("key index out of range 0..87")
    return np.searchsorted(np.asarray(REGION_BOUNDS[1:]), keys, side="right")
