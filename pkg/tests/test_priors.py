import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tipsynth.priors import (PositionPrior, PositionPriorEntry, PriorBuildError, build_position_prior,
                             build_wrist_offsets, interpolate_missing, nearest_rank, validate_prior)
from tipsynth.score import FingeringGrid


def press_fingering(T, rows):
    """rows: (frame_lo, frame_hi_exclusive, key, value)."""
    v = np.zeros((T, 88), dtype=np.int8)
    for lo, hi, k, f in rows:
        v[lo:hi, k] = f
    return FingeringGrid(v)


def tips_with(T, hand_values):
    return {h: np.zeros((T, 5, 3)) if v is None else v for h, v in hand_values.items()}


def test_gaussian_recovery(rng):
    sigma = np.array([16.3, 11.4, 7.7])
    mu = np.array([40.0, 900.0, -4.0])
    obs = rng.normal(mu, sigma, size=(1000, 3))
    e = PositionPriorEntry.from_observations(obs)
    assert np.all(np.abs(e.std - sigma) / sigma < 0.1)
    assert np.all(np.abs(e.p50 - mu) < 1.0)


def test_degenerate_cluster():
    e = PositionPriorEntry.from_observations(np.zeros((20, 3)))
    assert np.array_equal(e.mean, np.zeros(3)) and np.array_equal(e.p50, np.zeros(3))
    assert np.array_equal(e.std, np.zeros(3))


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=50), st.sampled_from([25, 50, 75]))
def test_nearest_rank_oracle(values, pct):
    s = np.sort(np.array(values))[:, None]
    # oracle: smallest value with at least pct% of the data at or below it
    n = len(values)
    expect = next(v for v in sorted(values) if sum(x <= v for x in values) >= pct / 100 * n)
    assert nearest_rank(s, pct)[0] == expect


def test_min_count_threshold():
    T = 9
    tips = np.zeros((T, 5, 3))
    tips[:, 1, 0] = np.arange(1, 10)
    fing = press_fingering(T, [(0, 9, 40, 7)])
    prior = build_position_prior([{"L": np.zeros((T, 5, 3)), "R": tips}], [fing])
    assert prior.get("R", 1, 40) is None and prior.counts[("R", 1, 40)] == 9
    prior = build_position_prior([{"L": np.zeros((T, 5, 3)), "R": tips}], [fing], min_count=9)
    assert prior.get("R", 1, 40).p50[0] == 5


def _full_prior(geom, skip=(), value=lambda h, f, k: (30.0 + f, 0.0, -4.0)):
    entries = {}
    for h in "LR":
        for f in range(5):
            for k in range(88):
                if (h, f, k) in skip:
                    continue
                x, _, z = value(h, f, k)
                p = np.array([x, geom.y_centers[k], z])
                entries[(h, f, k)] = PositionPriorEntry(p, np.ones(3), p - 1, p.copy(), p + 1, 10)
    return PositionPrior(entries)


def test_interpolate_midpoint_between_same_colour_donors(geom):
    # key 41 (white) empty; its white neighbours 39 and 43 sit symmetrically around it
    k, a, b = 41, 39, 43
    assert not any(geom.is_black(x) for x in (k, a, b))
    xz = {a: (10.0, -2.0), b: (30.0, -6.0)}
    prior = _full_prior(geom, skip={("R", 2, k)}, value=lambda h, f, kk: (xz.get(kk, (99.0, 0))[0], 0,
                                                                          xz.get(kk, (0, -4.0))[1]))
    e = interpolate_missing(prior, geom).get("R", 2, k)
    assert e.donors == (a, b)
    assert e.p50[0] == pytest.approx(20.0) and e.p50[2] == pytest.approx(-4.0)
    assert e.p50[1] == geom.y_centers[k]
    assert e.interpolated and e.n == 0


def test_interpolate_single_donor_copy(geom):
    skip = {("R", 2, k) for k in range(5)}
    prior = _full_prior(geom, skip=skip, value=lambda h, f, k: (float(k), 0.0, -3.0 - k))
    out = interpolate_missing(prior, geom)
    e = out.get("R", 2, 0)
    (d,) = e.donors
    donor = prior.get("R", 2, d)
    assert e.p50[0] == donor.p50[0] and e.p50[2] == donor.p50[2]
    assert e.p50[1] == geom.y_centers[0]
    # the donor entry itself is untouched
    assert donor.p50[1] == geom.y_centers[d]


def test_interpolate_identity_on_full_prior(geom):
    prior = _full_prior(geom)
    out = interpolate_missing(prior, geom)
    assert out.entries.keys() == prior.entries.keys()
    assert all(out.entries[s] is prior.entries[s] for s in prior.entries)


def test_interpolate_needs_a_donor(geom):
    prior = _full_prior(geom, skip={("L", 3, k) for k in range(88)})
    with pytest.raises(PriorBuildError):
        interpolate_missing(prior, geom)


def test_validate_prior_flags_bad_medians(geom):
    prior = _full_prior(geom)
    assert validate_prior(prior, geom) == [s for s in sorted(prior.entries) if geom.is_black(s[2])]


def test_prior_json_roundtrip(tmp_path, geom):
    prior = _full_prior(geom, skip={("R", 0, 3)})
    prior.counts[("R", 0, 3)] = 4
    p = tmp_path / "prior.json"
    prior.save(p)
    back = PositionPrior.load(p)
    assert back.entries.keys() == prior.entries.keys()
    assert back.counts == prior.counts
    for s, e in prior.entries.items():
        assert np.array_equal(back.entries[s].p50, e.p50)
    doc = prior.to_dict()
    assert doc["prior_version"] == 1 and doc["units"] == "mm" and "R/1/0" in doc["entries"]


def test_wrist_offsets_constant():
    T = 30
    fing = press_fingering(T, [(0, 10, 5, 7), (10, 20, 60, 8), (20, 30, 30, 2)])
    tips = {h: np.random.default_rng(0).normal(0, 20, (T, 5, 3)) for h in "LR"}
    wrist = {}
    for h in "LR":
        keys = fing.hand_keys(h)
        w = np.zeros((T, 3))
        for t in range(T):
            pressing = keys[t] >= 0
            c = tips[h][t, pressing].mean(axis=0) if pressing.any() else np.zeros(3)
            w[t] = c + [50, 0, 30]
        wrist[h] = w
    off = build_wrist_offsets([wrist], [tips], [fing])
    assert np.allclose(off.offsets[1], [50, 0, 30])
    assert np.allclose(off.offsets[0], [50, 0, 30])
    assert off.counts[1, 0] == 10 and off.counts[1, 5] == 10


def test_wrist_offsets_neighbour_fill():
    T = 10
    fing = press_fingering(T, [(0, 10, 70, 7)])  # region 6 only, right hand
    tips = {h: np.zeros((T, 5, 3)) for h in "LR"}
    wrist = {"L": np.zeros((T, 3)), "R": np.tile([1.0, 2.0, 3.0], (T, 1))}
    off = build_wrist_offsets([wrist], [tips], [fing])
    assert np.array_equal(off.offset("R", 7), off.offset("R", 6))
    # left hand had no frames: global mean
    assert np.allclose(off.offset("L", 0), [1, 2, 3])


def test_wrist_offsets_zero_press_error():
    fing = press_fingering(5, [])
    with pytest.raises(PriorBuildError):
        build_wrist_offsets([{"L": np.zeros((5, 3)), "R": np.zeros((5, 3))}],
                            [{h: np.zeros((5, 5, 3)) for h in "LR"}], [fing])
