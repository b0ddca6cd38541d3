"""MIDI and fingering ingest, rasterised onto the 59.94 fps frame grid."""
from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from .keyboard import NUM_KEYS

logger = logging.getLogger(__name__)

FPS = Fraction(60000, 1001)
WINDOW_LENGTH = 480
WINDOW_STRIDE = 240
MIDI_KEY_OFFSET = 21  # A0
DEFAULT_TEMPO = 500_000  # microseconds per quarter note


class MidiParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class FingeringError(ValueError):
    def __init__(self, message: str, rows: Sequence = ()):
        detail = "; ".join(str(r) for r in rows)
        super().__init__(f"{message}: {detail}" if detail else message)
        self.rows = list(rows)


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset: float
    key: int
    velocity: int
    duration: float

    def __post_init__(self):
        if not 0 <= self.key < NUM_KEYS:
            raise ValueError(f"key {self.key} outside 0..87")
        if not self.duration > 0:
            raise ValueError(f"note duration must be positive, got {self.duration}")

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass(frozen=True)
class FrameGrid:
    frame_count: int
    fps: Fraction = FPS

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError("frame_count must be positive")

    def frame_of(self, t: float) -> int:
        return math.floor(Fraction(t) * self.fps)

    def frame_span(self, start: float, end: float) -> tuple[int, int]:
        """Inclusive frame range whose [i/fps, (i+1)/fps) intersects [start, end)."""
        lo = math.floor(Fraction(start) * self.fps)
        hi = math.ceil(Fraction(end) * self.fps) - 1
        return max(lo, 0), min(hi, self.frame_count - 1)

    @classmethod
    def for_duration(cls, seconds: float) -> "FrameGrid":
        return cls(max(1, math.ceil(Fraction(seconds) * FPS)))


# --------------------------------------------------------------------------
# Standard MIDI files


def _read_varlen(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


def _write_varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


@dataclass
class _RawEvent:
    tick: int
    order: int
    kind: str  # "on", "off", "tempo", "end"
    channel: int = 0
    pitch: int = 0
    velocity: int = 0
    tempo: int = 0
    track: int = 0


def _parse_track(data: bytes, start: int, end: int, track: int) -> list[_RawEvent]:
    events = []
    pos, tick, status, order = start, 0, None, 0
    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("event missing after delta time", pos)
        b = data[pos]
        if b & 0x80:
            status = b
            pos += 1
        elif status is None:
            raise MidiParseError("running status without a previous status byte", pos)
        if status == 0xFF:
            if pos >= end:
                raise MidiParseError("truncated meta event", pos)
            mtype = data[pos]
            length, pos = _read_varlen(data, pos + 1, end)
            if pos + length > end:
                raise MidiParseError("meta event overruns track", pos)
            payload = data[pos:pos + length]
            pos += length
            if mtype == 0x51:
                if length != 3:
                    raise MidiParseError("tempo meta event must have 3 bytes", pos - length)
                events.append(_RawEvent(tick, order, "tempo", tempo=int.from_bytes(payload, "big"), track=track))
            elif mtype == 0x2F:
                events.append(_RawEvent(tick, order, "end", track=track))
                break
            status = None
        elif status in (0xF0, 0xF7):
            length, pos = _read_varlen(data, pos, end)
            pos += length
            if pos > end:
                raise MidiParseError("sysex overruns track", pos)
            status = None
        else:
            hi = status & 0xF0
            nbytes = 1 if hi in (0xC0, 0xD0) else 2
            if pos + nbytes > end:
                raise MidiParseError("truncated channel message", pos)
            d = data[pos:pos + nbytes]
            if any(x & 0x80 for x in d):
                raise MidiParseError("data byte with high bit set", pos)
            pos += nbytes
            if hi == 0x90 and d[1] > 0:
                events.append(_RawEvent(tick, order, "on", status & 0x0F, d[0], d[1], track=track))
            elif hi == 0x80 or (hi == 0x90 and d[1] == 0):
                events.append(_RawEvent(tick, order, "off", status & 0x0F, d[0], track=track))
        order += 1
    else:
        events.append(_RawEvent(tick, order, "end", track=track))
    return events


class TempoMap:
    """Piecewise-constant tempo over ticks; converts ticks to seconds."""

    def __init__(self, division: int, changes: Iterable[tuple[int, int]] = ()):
        self.division = division
        points = sorted(changes)
        ticks, tempos = [0], [DEFAULT_TEMPO]
        for tick, tempo in points:
            if tick == ticks[-1]:
                tempos[-1] = tempo
            else:
                ticks.append(tick)
                tempos.append(tempo)
        self.ticks = ticks
        self.tempos = tempos
        self.seconds = [0.0]
        for i in range(1, len(ticks)):
            self.seconds.append(self.seconds[-1] + (ticks[i] - ticks[i - 1]) * tempos[i - 1] / (1e6 * division))

    def to_seconds(self, tick: int) -> float:
        i = max(0, np.searchsorted(self.ticks, tick, side="right") - 1)
        return self.seconds[i] + (tick - self.ticks[i]) * self.tempos[i] / (1e6 * self.division)

    def to_ticks(self, seconds: float) -> int:
        i = max(0, np.searchsorted(self.seconds, seconds, side="right") - 1)
        return self.ticks[i] + round((seconds - self.seconds[i]) * 1e6 * self.division / self.tempos[i])


def parse_midi(data: bytes) -> list[NoteEvent]:
    """Decode an SMF (format 0 or 1) into onset-sorted note events.

    Note-on/off pairs are resolved first-in first-out per (channel, pitch).
    Notes still sounding at the end of their track are closed there with a
    warning. Pitches outside the piano range are dropped.
    """
    notes, _ = _parse_midi(data)
    return notes


def _parse_midi(data: bytes) -> tuple[list[NoteEvent], TempoMap]:
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    hlen = struct.unpack(">I", data[4:8])[0]
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiParseError("bad header length", 4)
    fmt, ntrks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    smpte = bool(division & 0x8000)
    if smpte:
        fps_code = 256 - (division >> 8)
        tpf = division & 0xFF
        seconds_per_tick = 1.0 / ((29.97 if fps_code == 29 else fps_code) * tpf)
    elif division == 0:
        raise MidiParseError("division must be positive", 12)

    pos = 8 + hlen
    raw: list[_RawEvent] = []
    for track in range(ntrks):
        if pos + 8 > len(data):
            raise MidiParseError(f"missing track chunk {track}", pos)
        cid = data[pos:pos + 4]
        clen = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        if pos + 8 + clen > len(data):
            raise MidiParseError(f"chunk {cid!r} overruns file", pos)
        if cid != b"MTrk":
            pos += 8 + clen  # unknown chunks are skipped per SMF rules
            continue
        raw.extend(_parse_track(data, pos + 8, pos + 8 + clen, track))
        pos += 8 + clen

    if smpte:
        # fixed tick length: a constant tempo of one tick per quarter
        tmap = TempoMap(1, [(0, round(seconds_per_tick * 1e6))])
        tmap.tempos = [seconds_per_tick * 1e6]
    else:
        tmap = TempoMap(division, [(e.tick, e.tempo) for e in raw if e.kind == "tempo"])

    notes: list[NoteEvent] = []
    open_notes: dict[tuple[int, int, int], list[tuple[int, int]]] = {}
    track_end: dict[int, int] = {}
    raw.sort(key=lambda e: (e.track, e.tick, e.order))
    for e in raw:
        if e.kind == "end":
            track_end[e.track] = e.tick
        elif e.kind == "on":
            open_notes.setdefault((e.track, e.channel, e.pitch), []).append((e.tick, e.velocity))
        elif e.kind == "off":
            stack = open_notes.get((e.track, e.channel, e.pitch))
            if not stack:
                continue
            on_tick, vel = stack.pop(0)
            _emit(notes, tmap, on_tick, e.tick, e.pitch, vel)
    for (track, _, pitch), stack in open_notes.items():
        for on_tick, vel in stack:
            logger.warning("note-on for pitch %d at tick %d never released; closing at track end", pitch, on_tick)
            _emit(notes, tmap, on_tick, track_end.get(track, on_tick), pitch, vel)
    notes.sort()
    return notes, tmap


def _emit(notes, tmap, on_tick, off_tick, pitch, vel):
    key = pitch - MIDI_KEY_OFFSET
    if not 0 <= key < NUM_KEYS:
        logger.warning("pitch %d outside the 88-key range dropped", pitch)
        return
    onset = tmap.to_seconds(on_tick)
    dur = tmap.to_seconds(off_tick) - onset
    if dur <= 0:
        logger.warning("zero-length note at pitch %d dropped", pitch)
        return
    notes.append(NoteEvent(onset, key, vel, dur))


def write_midi(notes: Sequence[NoteEvent], division: int = 480,
               tempo_changes: Sequence[tuple[float, int]] = ()) -> bytes:
    """Encode notes as a format-0 SMF; ``tempo_changes`` are (seconds, µs/quarter)."""
    tick_changes = []
    tmap = TempoMap(division)
    for sec, tempo in sorted(tempo_changes):
        tick = tmap.to_ticks(sec)
        tick_changes.append((tick, tempo))
        tmap = TempoMap(division, tick_changes)

    msgs = []  # (tick, priority, bytes)
    for tick, tempo in tick_changes:
        msgs.append((tick, 0, b"\xff\x51\x03" + tempo.to_bytes(3, "big")))
    for n in notes:
        pitch = n.key + MIDI_KEY_OFFSET
        on = tmap.to_ticks(n.onset)
        off = max(on + 1, tmap.to_ticks(n.offset))
        msgs.append((on, 2, bytes([0x90, pitch, max(1, min(127, n.velocity))])))
        msgs.append((off, 1, bytes([0x80, pitch, 0])))
    msgs.sort(key=lambda m: (m[0], m[1]))
    body = bytearray()
    last = 0
    for tick, _, payload in msgs:
        body += _write_varlen(tick - last) + payload
        last = tick
    body += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, division)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


# --------------------------------------------------------------------------
# Fingering


class FingeringGrid:
    """T x 88 finger assignment: 1-5 left thumb..pinky, 6-10 right, 0 none."""

    def __init__(self, values: np.ndarray):
        v = np.asarray(values)
        if v.ndim != 2 or v.shape[1] != NUM_KEYS:
            raise FingeringError(f"fingering grid must be T x {NUM_KEYS}, got {v.shape}")
        if v.size and (v.min() < 0 or v.max() > 10):
            raise FingeringError("finger values must lie in 0..10")
        self.values = v.astype(np.int8)
        self._check_one_key_per_finger()

    def _check_one_key_per_finger(self):
        bad = []
        for finger in range(1, 11):
            counts = (self.values == finger).sum(axis=1)
            for t in np.flatnonzero(counts > 1):
                bad.append((int(t), finger, np.flatnonzero(self.values[t] == finger).tolist()))
        if bad:
            raise FingeringError("finger assigned to several keys in one frame", bad)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        return isinstance(other, FingeringGrid) and np.array_equal(self.values, other.values)

    def slice(self, start: int, length: int) -> "FingeringGrid":
        out = np.zeros((length, NUM_KEYS), dtype=np.int8)
        chunk = self.values[start:start + length]
        out[:len(chunk)] = chunk
        return FingeringGrid(out)

    def hand_keys(self, hand: str) -> np.ndarray:
        """T x 5 key index pressed by each finger of ``hand`` (-1 when idle)."""
        base = 1 if hand == "L" else 6
        out = np.full((self.T, 5), -1, dtype=np.int64)
        for f in range(5):
            t, k = np.nonzero(self.values == base + f)
            out[t, f] = k
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "key", "finger"])
        for t, k in zip(*np.nonzero(self.values)):
            w.writerow([int(t), int(k), int(self.values[t, k])])
        if self.T and not self.values[-1].any():
            # explicit empty cell on the last frame keeps trailing silence
            w.writerow([self.T - 1, 0, 0])
        return buf.getvalue()


def parse_fingering(text: str, frame_count: Optional[int] = None) -> FingeringGrid:
    """Read a ``frame,key,finger`` CSV into a dense grid; unlisted cells are 0."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return FingeringGrid(np.zeros((frame_count or 0, NUM_KEYS), dtype=np.int8))
    missing = {"frame", "key", "finger"} - {f.strip() for f in reader.fieldnames}
    if missing:
        raise FingeringError(f"fingering CSV lacks columns {sorted(missing)}")
    rows, bad = [], []
    for lineno, row in enumerate(reader, start=2):
        try:
            t, k, f = int(row["frame"]), int(row["key"]), int(row["finger"])
        except (TypeError, ValueError):
            bad.append((lineno, dict(row)))
            continue
        if not (0 <= f <= 10) or not (0 <= k < NUM_KEYS) or t < 0:
            bad.append((lineno, t, k, f))
            continue
        rows.append((lineno, t, k, f))
    if bad:
        raise FingeringError("invalid fingering rows", bad)
    T = frame_count if frame_count is not None else (max((r[1] for r in rows), default=-1) + 1)
    values = np.zeros((T, NUM_KEYS), dtype=np.int8)
    seen_finger: dict[tuple[int, int], tuple] = {}
    seen_key: dict[tuple[int, int], tuple] = {}
    conflicts = []
    for row in rows:
        _, t, k, f = row
        if t >= T:
            conflicts.append(row)
            continue
        if (t, k) in seen_key and seen_key[(t, k)][3] != f:
            conflicts.append((seen_key[(t, k)], row))
        if f and (t, f) in seen_finger and seen_finger[(t, f)][2] != k:
            conflicts.append((seen_finger[(t, f)], row))
        seen_key[(t, k)] = row
        if f:
            seen_finger[(t, f)] = row
        values[t, k] = f
    if conflicts:
        raise FingeringError("conflicting fingering rows", conflicts)
    return FingeringGrid(values)


@dataclass(frozen=True)
class GestureSegment:
    start_frame: int
    end_frame: int
    hand: str


def parse_gestures(text: str) -> list[GestureSegment]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        seg = GestureSegment(int(row["start_frame"]), int(row["end_frame"]), row["hand"].strip().upper())
        if seg.end_frame < seg.start_frame or seg.hand not in ("L", "R"):
            raise FingeringError("invalid gesture boundary row", [row])
        out.append(seg)
    return out


# --------------------------------------------------------------------------
# Rasterisation and windows


@dataclass
class Raster:
    press_mask: dict  # hand -> (T, 5) bool
    active_keys: list  # per frame sorted list of sounding keys
    grid: FrameGrid

    def to_json_dict(self) -> dict:
        return {
            "fps": [self.grid.fps.numerator, self.grid.fps.denominator],
            "frame_count": self.grid.frame_count,
            "press_mask": {h: m.astype(int).tolist() for h, m in self.press_mask.items()},
            "active_keys": self.active_keys,
        }


def press_masks(fingering: FingeringGrid) -> dict:
    return {h: fingering.hand_keys(h) >= 0 for h in ("L", "R")}


def active_key_roll(events: Sequence[NoteEvent], grid: FrameGrid) -> np.ndarray:
    roll = np.zeros((grid.frame_count, NUM_KEYS), dtype=bool)
    for n in events:
        lo, hi = grid.frame_span(n.onset, n.offset)
        if lo <= hi:
            roll[lo:hi + 1, n.key] = True
    return roll


def rasterize(events: Sequence[NoteEvent], grid: FrameGrid, fingering: FingeringGrid) -> Raster:
    if fingering.T != grid.frame_count:
        raise ValueError(f"fingering has {fingering.T} frames, grid has {grid.frame_count}")
    roll = active_key_roll(events, grid)
    active = [np.flatnonzero(r).tolist() for r in roll]
    return Raster(press_masks(fingering), active, grid)


@dataclass(frozen=True)
class Window:
    start: int
    length: int = WINDOW_LENGTH
    valid: int = WINDOW_LENGTH

    @property
    def stop(self) -> int:
        return self.start + self.valid

    @property
    def valid_mask(self) -> np.ndarray:
        m = np.zeros(self.length, dtype=bool)
        m[:self.valid] = True
        return m

    def take(self, array: np.ndarray) -> np.ndarray:
        """Slice frames of ``array`` (time on axis 0), zero-padding past the end."""
        out = np.zeros((self.length,) + array.shape[1:], dtype=array.dtype)
        out[:self.valid] = array[self.start:self.stop]
        return out

    def notes(self, events: Sequence[NoteEvent], fps: Fraction = FPS) -> list[NoteEvent]:
        t0 = float(self.start / fps)
        t1 = float(self.stop / fps)
        out = []
        for n in events:
            if n.offset > t0 and n.onset < t1:
                out.append(NoteEvent(n.onset - t0, n.key, n.velocity, n.duration))
        return out


def make_windows(T: int, length: int = WINDOW_LENGTH, stride: int = WINDOW_STRIDE) -> list[Window]:
    if T < 1:
        raise ValueError("T must be at least 1")
    if T <= length:
        return [Window(0, length, T)]
    starts = []
    s = 0
    while s + length < T:
        starts.append(s)
        s += stride
    starts.append(T - length)
    return [Window(s, length, length) for s in starts]
