"""``TPTJ`` trajectory files.

Layout (little-endian)::

    b"TPTJ"  u16 version  u32 fps_num  u32 fps_den  u32 T  u32 J
    1 byte hand tag (L, R or B)  8 bytes stage tag (ASCII, NUL padded)
    T*J*3 float32 payload (mm)
    u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .score import FPS

MAGIC = b"TPTJ"
VERSION = 1
_HEADER = struct.Struct("<4sHIIII1s8s")


class TrajectoryFileError(ValueError):
    pass


@dataclass
class TrajectoryFile:
    data: np.ndarray  # T x J x 3
    hand: str
    stage: str
    fps: Fraction = FPS

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise TrajectoryFileError(f"expected T x J x 3, got {self.data.shape}")
        if self.hand not in ("L", "R", "B"):
            raise TrajectoryFileError(f"hand tag must be L, R or B, got {self.hand!r}")
        if len(self.stage.encode("ascii")) > 8:
            raise TrajectoryFileError("stage tag longer than 8 bytes")

    def to_bytes(self) -> bytes:
        T, J, _ = self.data.shape
        head = _HEADER.pack(MAGIC, VERSION, self.fps.numerator, self.fps.denominator, T, J,
                            self.hand.encode(), self.stage.encode("ascii").ljust(8, b"\0"))
        body = head + np.ascontiguousarray(self.data, dtype="<f4").tobytes()
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "TrajectoryFile":
        if len(raw) < _HEADER.size + 4 or raw[:4] != MAGIC:
            raise TrajectoryFileError("not a TPTJ trajectory file")
        magic, version, num, den, T, J, hand, stage = _HEADER.unpack_from(raw)
        if version != VERSION:
            raise TrajectoryFileError(f"unsupported version {version}")
        n = T * J * 3
        if len(raw) != _HEADER.size + 4 * n + 4:
            raise TrajectoryFileError("payload length does not match header")
        if struct.unpack("<I", raw[-4:])[0] != zlib.crc32(raw[:-4]):
            raise TrajectoryFileError("checksum mismatch")
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size).reshape(T, J, 3).copy()
        return cls(data, hand.decode(), stage.rstrip(b"\0").decode("ascii"), Fraction(num, den))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TrajectoryFile":
        return cls.from_bytes(Path(path).read_bytes())
