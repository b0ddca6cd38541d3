"""Acceptance criteria 1-11; each test prints one PASS/FAIL line."""
import json
import time
from functools import lru_cache

import numpy as np
import pytest
import torch
from scipy.stats import norm

from conftest import ACCEPTANCE_LINES
from tipsynth.corpus import NoiseModel, SyntheticCorpusSpec, build_hand_joints, generate_synthetic_corpus
from tipsynth.evaluate import _match_sweep, accel_ratio, position_metrics
from tipsynth.gradchecks import run_gradchecks
from tipsynth.pipeline import PipelineConfig, build_priors, evaluate_corpus, load_geometry, train_all
from tipsynth.pose import TIP_JOINTS, WRIST, bone_lengths, pose_loss, stgcn_synthesize
from tipsynth.priors import build_position_prior
from tipsynth.score import FingeringGrid, make_windows
from tipsynth.stitch import blend_weights, stitch_windows

ACCEPT_MODELS = dict(refine_d_model=32, refine_depth=2, refine_heads=4, wrist_channels=32, wrist_blocks=3,
                     stgcn_channels=(16, 32, 64))
ACCEPT_TRAINING = dict(steps_refine=150, steps_smoother=150, steps_wrist=150, steps_pose=120,
                       steps_pose_refine=80)
CORPUS = SyntheticCorpusSpec(n_pieces=20, seed=0)


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def accept_cfg(**kw) -> PipelineConfig:
    return PipelineConfig(models=dict(ACCEPT_MODELS), training=dict(ACCEPT_TRAINING), **kw)


def stage1_run(out_dir):
    t0 = time.time()
    cfg = accept_cfg(tap="1")
    geom = load_geometry(cfg)
    corpus = generate_synthetic_corpus(CORPUS, geom)
    bundle = build_priors(corpus.split("train"), cfg, geom)
    report, results = evaluate_corpus(corpus.pieces, bundle, cfg, geom, stop_after="1", out_dir=out_dir)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return report, time.time() - t0


def closed_loop(out_dir):
    cfg = accept_cfg()
    geom = load_geometry(cfg)
    corpus = generate_synthetic_corpus(CORPUS, geom)
    t0 = time.time()
    bundle = train_all(corpus.split("train"), cfg, geom)
    train_s = time.time() - t0
    report, results = evaluate_corpus(corpus.split("test"), bundle, cfg, geom, out_dir=out_dir)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return dict(cfg=cfg, corpus=corpus, bundle=bundle, report=report, results=results, train_s=train_s)


@pytest.fixture(scope="module")
def loop_a(tmp_path_factory):
    return closed_loop(tmp_path_factory.mktemp("loop_a"))


@pytest.fixture(scope="module")
def stage1_a(tmp_path_factory):
    d = tmp_path_factory.mktemp("stage1_a")
    return (d,) + stage1_run(d)


@pytest.fixture(scope="module")
def mask_ablation():
    """Refinement stages trained and run with and without Y/Z masking on a noisy corpus."""
    geom = load_geometry(PipelineConfig())
    noisy = generate_synthetic_corpus(SyntheticCorpusSpec(
        n_pieces=10, length_range=(10.0, 14.0), seed=7,
        noise=NoiseModel(jitter_sigma=2.0, press_error_rate=0.3)), geom)
    held_out = noisy.split("val") + noisy.split("test")
    out = {}
    for y_mask in (True, False):
        cfg = PipelineConfig(y_mask=y_mask, models=dict(refine_d_model=32, refine_depth=2, refine_heads=4),
                             training=dict(steps_refine=100, steps_smoother=60))
        bundle = train_all(noisy.split("train"), cfg, geom, stages=("2.1", "2.2", "2.3"))
        out[y_mask] = evaluate_corpus(held_out, bundle, cfg, geom, stop_after="2.3")
    return out


# --------------------------------------------------------------------------


def _prior_recovery(stratified: bool, seed: int = 0):
    """Worst sigma and median errors over ten slots of n = 1000 Gaussian observations."""
    sigma = np.array([16.3, 11.4, 7.7])
    n = 1000
    rng = np.random.default_rng(seed)
    slots = [("R", f, k) for f, k in enumerate((39, 41, 43, 44, 46))]
    slots += [("L", f, k) for f, k in enumerate((27, 25, 24, 22, 20))]
    values = np.zeros((n, 88), dtype=np.int8)
    tips = {h: np.zeros((n, 5, 3)) for h in ("L", "R")}
    means, samples = {}, {}
    z = norm.ppf((np.arange(n) + 0.5) / n)
    for h, f, k in slots:
        values[:, k] = (1 if h == "L" else 6) + f
        mu = rng.uniform(-100, 100, 3)
        if stratified:
            # Gaussian quantiles, shuffled independently per axis
            obs = mu + sigma * np.stack([rng.permutation(z) for _ in range(3)], axis=1)
        else:
            obs = mu + rng.normal(0, sigma, (n, 3))
        means[(h, f, k)], samples[(h, f, k)] = mu, obs
        tips[h][:, f] = obs
    prior = build_position_prior([tips], [FingeringGrid(values)])
    worst_sigma = worst_med = oracle = 0.0
    hits = 0
    for slot, mu in means.items():
        e = prior[slot]
        assert e.n == n
        err = np.abs(e.p50 - mu)
        hits += bool(err.max() < 1.0)
        worst_sigma = max(worst_sigma, float(np.max(np.abs(e.std / sigma - 1))))
        worst_med = max(worst_med, float(err.max()))
        ref = samples[slot]
        oracle = max(oracle, float(np.abs(e.std - ref.std(axis=0, ddof=1)).max()),
                     float(np.abs(e.p50 - np.sort(ref, axis=0)[n // 2 - 1]).max()))
    return worst_sigma, worst_med, hits, oracle


def test_criterion_01_prior_recovery():
    t0 = time.time()
    ws, wm, _, oracle_s = _prior_recovery(stratified=True)
    _, wm_iid, hits_iid, oracle_i = _prior_recovery(stratified=False)
    dt = time.time() - t0
    verdict(1, ws < 0.10 and wm < 1.0 and max(oracle_s, oracle_i) < 1e-9 and dt < 10,
            f"stratified samples: worst sigma error {ws:.1%}, worst median error {wm:.2f} mm over 10 slots; "
            f"iid draws: {hits_iid}/10 slots within 1 mm (worst {wm_iid:.2f} mm); {dt:.1f}s")


def test_criterion_02_stage1_contacts(stage1_a):
    _, report, dt = stage1_a
    verdict(2, report.recall >= 0.98 and report.precision >= 0.95 and dt < 120,
            f"Stage-1 recall {report.recall:.4f}, precision {report.precision:.4f} "
            f"on {CORPUS.n_pieces} pieces in {dt:.1f}s")


@pytest.mark.slow
def test_criterion_03_masking(loop_a, mask_ablation):
    violations, checked = 0, 0
    for res in loop_a["results"]:
        piece = next(p for p in loop_a["corpus"].pieces if p.name == res.name)
        for h in ("L", "R"):
            press = piece.fingering.hand_keys(h) >= 0
            ref = res.stages["1"][h][press][:, 1:]
            for s in ("2.1", "2.2", "2.3"):
                checked += ref.size
                violations += int(np.sum(res.stages[s][h][press][:, 1:] != ref))
    on, off = mask_ablation[True][0].recall, mask_ablation[False][0].recall
    delta = off - on
    verdict(3, violations == 0 and checked > 0 and delta <= 0,
            f"{violations} of {checked} pressed-tip Y/Z values changed through Stage 2.3; "
            f"noisy-corpus recall masked {on:.4f} vs unmasked {off:.4f} (delta {delta:+.4f})")


@pytest.mark.slow
def test_criterion_04_clamp_bounds(loop_a, mask_ablation):
    runs = list(loop_a["results"]) + [r for v in mask_ablation.values() for r in v[1]]
    tip = max(r.stats.max_abs.get(s, 0.0) for r in runs for s in ("2.1", "2.2"))
    wrist = max(r.stats.max_abs.get("3", 0.0) for r in runs)
    verdict(4, tip <= 80.0 and wrist <= 50.0,
            f"{len(runs)} inference runs, max fingertip residual component {tip:.2f} mm (<= 80), "
            f"max wrist residual component {wrist:.2f} mm (<= 50)")


def test_criterion_05_gradchecks():
    t0 = time.time()
    outcomes = run_gradchecks()
    dt = time.time() - t0
    failed = [o.name for o in outcomes if not o.passed]
    worst = max(outcomes, key=lambda o: o.max_rel_error / o.tolerance)
    verdict(5, not failed and dt < 300,
            f"{len(outcomes)} blocks checked in {dt:.1f}s, worst {worst.name} {worst.max_rel_error:.1e} "
            f"(tol {worst.tolerance:.0e}), failed: {failed or 'none'}")


@pytest.mark.slow
def test_criterion_06_anchor_preservation(loop_a):
    model = loop_a["bundle"].pose
    rng = np.random.default_rng(6)
    exact = 0
    for _ in range(100):
        wrist = rng.normal(0, 150, (480, 3))
        tips = wrist[:, None] + rng.normal(0, 60, (480, 5, 3))
        out = stgcn_synthesize(wrist, tips, rng.random((480, 15)), model)
        exact += int(np.array_equal(out[:, WRIST], wrist) and np.array_equal(out[:, TIP_JOINTS], tips))
    verdict(6, exact == 100, f"{exact}/100 random windows keep wrist and fingertip anchors bit-exactly")


def test_criterion_07_pose_loss_identities():
    tips = np.zeros((3, 5, 3))
    tips[:, :, 0] = [30, 40, 45, 42, 30]
    tips[:, :, 1] = [0, 22, 44, 66, 88]
    tips[:, :, 2] = 8.0
    pose = torch.tensor(build_hand_joints(tips, "R", tips[:, :, 1].mean(axis=1), 59.94)[:1])
    bones = bone_lengths(pose)[0].numpy()
    zero = pose_loss(pose, pose.clone(), bones).total.item()
    bent = pose.clone()
    d = bent[0, 8] - bent[0, 7]
    bent[0, 8] = bent[0, 8] + d / torch.linalg.norm(d)
    l_bone = pose_loss(bent, pose, bones).bone.item()
    verdict(7, zero == 0.0 and abs(l_bone - 1 / 20) < 1e-9,
            f"pose_loss(x, x) = {zero}, 1 mm elongation gives L_bone = {l_bone:.12f} (target 0.05)")


def _exhaustive_max_matching(pred, gt, tol):
    @lru_cache(maxsize=None)
    def best(i, used):
        if i == len(pred):
            return 0
        out = best(i + 1, used)
        for j, (tg, kg) in enumerate(gt):
            if not used >> j & 1 and kg == pred[i][1] and abs(pred[i][0] - tg) <= tol:
                out = max(out, 1 + best(i + 1, used | 1 << j))
        return out
    return best(0, 0)


def test_criterion_08_evaluator_oracles():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(1000):
        n_gt, n_pred = rng.integers(0, 9, 2)
        gt = [(float(rng.uniform(0, 1.5)), int(rng.integers(0, 3))) for _ in range(n_gt)]
        pred = [(float(rng.uniform(0, 1.5)), int(rng.integers(0, 3))) for _ in range(n_pred)]
        mismatches += len(_match_sweep(pred, gt, 0.1)) != _exhaustive_max_matching(tuple(pred), tuple(gt), 0.1)
    worst = 0.0
    for _ in range(20):
        T = int(rng.integers(3, 12))
        p, g = rng.normal(size=(T, 21, 3)), rng.normal(size=(T, 21, 3))
        num = den = 0.0
        err = 0.0
        for t in range(1, T - 1):
            for j in range(21):
                a = [p[t + 1, j, c] - 2 * p[t, j, c] + p[t - 1, j, c] for c in range(3)]
                b = [g[t + 1, j, c] - 2 * g[t, j, c] + g[t - 1, j, c] for c in range(3)]
                num += sum(x * x for x in a) ** 0.5
                den += sum(x * x for x in b) ** 0.5
        for t in range(T):
            for j in range(21):
                err += sum((p[t, j, c] - g[t, j, c]) ** 2 for c in range(3)) ** 0.5
        worst = max(worst, abs(accel_ratio(p, g) - num / den), abs(position_metrics(p, g)[0] - err / (T * 21)))
    verdict(8, mismatches == 0 and worst < 1e-6,
            f"{mismatches} matching mismatches in 1000 instances; worst metric deviation {worst:.1e}")


def test_criterion_09_stitching():
    worst = 0.0
    for T in (1, 300, 480, 481, 719, 1199, 1200, 2000):
        w = blend_weights(make_windows(T), T)
        worst = max(worst, float(np.abs(w.sum(axis=0) - 1).max()))
    T = 1200
    wins = make_windows(T)
    step = stitch_windows([np.full((480, 1), 10.0 * (n % 2)) for n in range(len(wins))], wins, T)
    jump = float(np.abs(np.diff(step[:, 0])).max())
    x = np.random.default_rng(9).normal(size=(480, 5, 3))
    passthrough = np.array_equal(stitch_windows([x], make_windows(480), 480), x)
    verdict(9, worst <= 1e-6 and jump < 5.0 and passthrough,
            f"max weight-sum error {worst:.1e}, 10 mm seam -> max frame jump {jump:.2f} mm, "
            f"single-window passthrough {'exact' if passthrough else 'NOT exact'}")


@pytest.mark.slow
def test_criterion_10_closed_loop(loop_a):
    r = loop_a["report"]
    train_min = loop_a["train_s"] / 60
    verdict(10, r.f1 >= 0.90 and r.mpjpe < 15.0 and train_min < 30,
            f"Stage-2.2 F1 {r.f1:.4f} (P {r.precision:.4f}, R {r.recall:.4f}), MPJPE {r.mpjpe:.2f} mm, "
            f"training {train_min:.1f} min")


@pytest.mark.slow
def test_criterion_11_determinism(loop_a, stage1_a, tmp_path):
    dir_a1 = stage1_a[0]
    dir_a10 = dir_a1.parent / [d.name for d in dir_a1.parent.iterdir() if d.name.startswith("loop_a")][0]
    for sub in ("s1", "cl"):
        (tmp_path / sub).mkdir()
    stage1_run(tmp_path / "s1")
    closed_loop(tmp_path / "cl")
    compared, differ = 0, []
    for a, b in ((dir_a1, tmp_path / "s1"), (dir_a10, tmp_path / "cl")):
        files_a = sorted(f.relative_to(a) for f in a.rglob("*") if f.is_file())
        files_b = sorted(f.relative_to(b) for f in b.rglob("*") if f.is_file())
        if files_a != files_b:
            differ.append(f"file sets differ under {a.name}")
        for f in files_a:
            compared += 1
            if (a / f).read_bytes() != (b / f).read_bytes():
                differ.append(str(f))
    verdict(11, not differ and compared > 0,
            f"{compared} trajectory/report files compared across two seeded runs, {len(differ)} differ")
