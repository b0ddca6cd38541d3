from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tipsynth.trajfile import TrajectoryFile, TrajectoryFileError


@given(st.integers(1, 30), st.sampled_from([1, 5, 21]), st.sampled_from("LRB"), st.text("S1234.R", max_size=4))
def test_roundtrip(T, J, hand, stage):
    data = np.random.default_rng(T).normal(0, 100, (T, J, 3)).astype(np.float32)
    tf = TrajectoryFile.from_bytes(TrajectoryFile(data, hand, stage).to_bytes())
    assert np.array_equal(tf.data, data) and tf.hand == hand and tf.stage == stage
    assert tf.fps == Fraction(60000, 1001)


def test_crc_detects_corruption():
    raw = bytearray(TrajectoryFile(np.ones((4, 21, 3)), "R", "S4R").to_bytes())
    raw[40] ^= 0xFF
    with pytest.raises(TrajectoryFileError, match="checksum"):
        TrajectoryFile.from_bytes(bytes(raw))


def test_bad_header_and_length():
    raw = TrajectoryFile(np.ones((4, 5, 3)), "L", "S1").to_bytes()
    with pytest.raises(TrajectoryFileError):
        TrajectoryFile.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(TrajectoryFileError):
        TrajectoryFile.from_bytes(raw[:-8])


def test_invalid_construction():
    with pytest.raises(TrajectoryFileError):
        TrajectoryFile(np.ones((4, 3)), "R", "S1")
    with pytest.raises(TrajectoryFileError):
        TrajectoryFile(np.ones((4, 1, 3)), "X", "S1")
    with pytest.raises(TrajectoryFileError):
        TrajectoryFile(np.ones((4, 1, 3)), "R", "toolongtag")


def test_save_load(tmp_path):
    tf = TrajectoryFile(np.arange(30, dtype=np.float32).reshape(2, 5, 3), "R", "S2.3")
    tf.save(tmp_path / "a.tptj")
    back = TrajectoryFile.load(tmp_path / "a.tptj")
    assert np.array_equal(back.data, tf.data) and back.stage == "S2.3"
