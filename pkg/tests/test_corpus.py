import numpy as np
import pytest

from tipsynth.corpus import (Corpus, NoiseModel, SyntheticCorpusSpec, build_hand_joints, generate_synthetic_corpus,
                             reference_bone_lengths)
from tipsynth.evaluate import detect_presses, key_contact_f1
from tipsynth.pose import bone_lengths

TINY = dict(n_pieces=4, length_range=(4.0, 5.0), seed=11)


def test_deterministic(geom):
    a = generate_synthetic_corpus(SyntheticCorpusSpec(**TINY), geom)
    b = generate_synthetic_corpus(SyntheticCorpusSpec(**TINY), geom)
    for pa, pb in zip(a.pieces, b.pieces):
        assert pa.notes == pb.notes and pa.split == pb.split
        assert np.array_equal(pa.joints["R"], pb.joints["R"])


def test_split_counts():
    assert SyntheticCorpusSpec(n_pieces=20).split_counts() == (14, 3, 3)
    with pytest.raises(ValueError):
        SyntheticCorpusSpec(split_ratios=(0.5, 0.2, 0.2))


def test_splits_assigned(small_corpus):
    names = {s: [p.name for p in small_corpus.split(s)] for s in ("train", "val", "test")}
    assert sum(map(len, names.values())) == 6
    assert len(names["train"]) == 4


def test_save_load_roundtrip(tmp_path, geom):
    c = generate_synthetic_corpus(SyntheticCorpusSpec(**TINY, noise=NoiseModel(1.0, 0.01, 0.1)), geom)
    c.save(tmp_path)
    back = Corpus.load(tmp_path)
    assert back.spec == c.spec
    for pa, pb in zip(c.pieces, back.pieces):
        assert pa.T == pb.T and pa.split == pb.split
        assert np.array_equal(pa.fingering.values, pb.fingering.values)
        assert [(n.key, n.velocity) for n in pa.notes] == [(n.key, n.velocity) for n in pb.notes]
        assert max(abs(x.onset - y.onset) for x, y in zip(pa.notes, pb.notes)) < 1e-6
        assert np.array_equal(pa.clean_joints["L"], pb.clean_joints["L"])


def test_clean_motion_detects_every_note(small_corpus, geom):
    for p in small_corpus.pieces:
        events = []
        for h in ("L", "R"):
            events += detect_presses(p.tips(clean=True)[h], geom, hand=h)
        r = key_contact_f1(events, p.notes)
        assert r.recall == 1.0 and r.precision == 1.0


def test_noise_only_touches_captured_motion(geom):
    c = generate_synthetic_corpus(SyntheticCorpusSpec(**TINY, noise=NoiseModel(jitter_sigma=2.0)), geom)
    clean = generate_synthetic_corpus(SyntheticCorpusSpec(**TINY), geom)
    p, q = c.pieces[0], clean.pieces[0]
    assert np.array_equal(p.clean_joints["R"], q.clean_joints["R"])
    d = p.joints["R"] - p.clean_joints["R"]
    assert 1.5 < d.std() < 2.5


def test_bones_are_rigid(small_corpus):
    p = small_corpus.pieces[0]
    lengths = bone_lengths(p.clean_joints["R"])
    ref = reference_bone_lengths()
    rigid = np.all(np.abs(lengths - ref) < 1e-6, axis=1)
    # only frames whose tip target is out of reach stretch a chain, and only slightly
    assert rigid.mean() > 0.6
    assert np.all(np.abs(lengths / ref - 1) < 0.1)


def test_fingering_matches_notes(small_corpus):
    p = small_corpus.pieces[0]
    active = p.fingering.values > 0
    for n in p.notes:
        lo, hi = p.grid.frame_span(n.onset, n.onset + n.duration)
        if lo <= hi:
            assert active[lo:hi + 1, n.key].all()
