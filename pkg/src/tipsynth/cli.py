"""Command-line entry point: ``tipsynth <verb> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .corpus import Corpus, NoiseModel, SyntheticCorpusSpec, generate_synthetic_corpus
from .evaluate import aggregate, detect_presses, piece_counts
from .pipeline import (HANDS, STAGE_ORDER, THROUGH, ModelBundle, PieceInput, PipelineConfig, PipelineError,
                       build_priors, evaluate_result, load_geometry, run_pipeline, train_stage, write_stage_files)
from .score import FrameGrid, parse_fingering, parse_gestures, parse_midi, rasterize
from .trajfile import TrajectoryFile

logger = logging.getLogger("tipsynth")

# `train --stage 4` covers the pose network and its MIDI-conditioned refinement
TRAIN_STAGES = {"2.1": ("2.1",), "2.2": ("2.2",), "2.3": ("2.3",), "3": ("3",), "4": ("4", "4r")}


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    overrides = {}
    if getattr(args, "keyboard", None):
        overrides["keyboard"] = args.keyboard
    if getattr(args, "no_y_mask", False):
        overrides["y_mask"] = False
    if getattr(args, "conditioning", None):
        overrides["conditioning"] = args.conditioning
    if getattr(args, "fusion", None):
        overrides["fusion"] = args.fusion
    if getattr(args, "tap", None):
        overrides["tap"] = args.tap
    if overrides:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON (defaults when omitted)")
    p.add_argument("--keyboard", help="keyboard geometry JSON overriding the built-in layout")


def _ablation(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-y-mask", action="store_true", help="disable Y/Z residual masking on pressed tips")
    p.add_argument("--conditioning", choices=("raw", "none"))
    p.add_argument("--fusion", choices=("film", "concat"))


def cmd_gen_corpus(args) -> int:
    spec = SyntheticCorpusSpec(n_pieces=args.pieces, seed=args.seed,
                               noise=NoiseModel(args.jitter, args.dropout, args.press_error))
    corpus = generate_synthetic_corpus(spec, load_geometry(_config(args)))
    manifest = corpus.save(args.out)
    print(f"wrote {len(corpus.pieces)} pieces to {manifest}")
    return 0


def cmd_build_priors(args) -> int:
    cfg = _config(args)
    corpus = Corpus.load(Path(args.train).parent)
    bundle = build_priors(corpus.split(args.split), cfg, load_geometry(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bundle.prior.save(out)
    (out.parent / "wrist_offsets.json").write_text(json.dumps(bundle.wrist_offsets.to_dict(), indent=1))
    bundle.bones.save(out.parent / "bones.json")
    print(f"prior covers {bundle.prior.coverage}/880 slots -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    geom = load_geometry(cfg)
    corpus = Corpus.load(Path(args.train).parent)
    pieces = corpus.split(args.split)
    models = Path(args.models)
    bundle = ModelBundle.load(models) if models.exists() else ModelBundle()
    if bundle.prior is None:
        fresh = build_priors(pieces, cfg, geom)
        bundle.prior, bundle.wrist_offsets, bundle.bones = fresh.prior, fresh.wrist_offsets, fresh.bones
    for s in TRAIN_STAGES[args.stage]:
        train_stage(s, pieces, bundle, cfg, geom)
    bundle.save(models)
    print(f"stage {args.stage} trained -> {models}")
    return 0


def _gt_from_npz(path, name=None) -> dict:
    arrs = np.load(path)
    return {h: arrs[f"joints_{h}"] for h in HANDS if f"joints_{h}" in arrs}


def cmd_synthesize(args) -> int:
    cfg = _config(args)
    geom = load_geometry(cfg)
    bundle = ModelBundle.load(args.models)
    stop = THROUGH[args.through_stage]
    jobs = []
    if args.manifest:
        corpus = Corpus.load(Path(args.manifest).parent)
        for p in sorted(corpus.split(args.split), key=lambda p: p.name):
            jobs.append((PieceInput.from_piece(p), p.clean_joints))
    else:
        if not (args.midi and args.fingering):
            print("synthesize needs --midi and --fingering (or --manifest)", file=sys.stderr)
            return 2
        notes = parse_midi(Path(args.midi).read_bytes())
        fing = parse_fingering(Path(args.fingering).read_text())
        if args.gestures:
            parse_gestures(Path(args.gestures).read_text())
        if args.dump_raster:
            raster = rasterize(notes, FrameGrid(fing.T), fing)
            Path(args.dump_raster).write_text(json.dumps(raster.to_json_dict()))
        jobs.append((PieceInput(Path(args.midi).stem, notes, fing), _gt_from_npz(args.gt) if args.gt else None))
    out = Path(args.out)
    counts = []
    status = 0
    for inp, gt in jobs:
        try:
            res = run_pipeline(inp, bundle, cfg, geom, stop)
        except PipelineError as e:
            print(f"{inp.name}: {e}", file=sys.stderr)
            partial = getattr(e, "partial", None)
            if partial is not None and partial.stages:
                write_stage_files(partial, out)
            status = 1
            continue
        write_stage_files(res, out)
        if gt is not None:
            counts.append(evaluate_result(res, inp.notes, cfg, geom, gt))
    if counts:
        report = aggregate(counts, config=cfg.to_dict())
        path = Path(args.report) if args.report else out / "report.json"
        path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        mpjpe = "n/a" if report.mpjpe is None else f"{report.mpjpe:.2f} mm"
        print(f"F1 {report.f1:.4f}  MPJPE {mpjpe} -> {path}")
    return status


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    geom = load_geometry(cfg)
    notes = parse_midi(Path(args.midi).read_bytes())
    preds = [TrajectoryFile.load(p) for p in args.pred]
    if args.fingering:
        fing = parse_fingering(Path(args.fingering).read_text())
        for tf in preds:
            if tf.data.shape[0] != fing.T:
                raise SystemExit(f"trajectory has {tf.data.shape[0]} frames, fingering {fing.T}")
    events = []
    pose = {}
    for tf in preds:
        tips = tf.data[:, [4, 8, 12, 16, 20]] if tf.data.shape[1] == 21 else tf.data
        events += detect_presses(tips.astype(float), geom, cfg.thresholds, cfg.min_frames, tf.hand)
        pose[tf.hand] = tf.data.astype(float)
    gt = None
    if args.gt:
        gt = {}
        for p in args.gt:
            tf = TrajectoryFile.load(p)
            gt[tf.hand] = tf.data.astype(float)
    counts = piece_counts(Path(args.midi).stem, events, notes, pose if gt else None, gt, "all", cfg.onset_tol_ms)
    report = aggregate([counts], config=cfg.to_dict())
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text)
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradchecks import run_gradchecks
    ok = True
    for o in run_gradchecks():
        ok &= o.passed
        print(f"{'PASS' if o.passed else 'FAIL'}  {o.name:22s} max rel err {o.max_rel_error:.2e} (< {o.tolerance:.0e})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tipsynth", description="Hand motion synthesis from MIDI and fingering.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic training corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--pieces", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=0.0, help="capture jitter sigma (mm)")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--press-error", type=float, default=0.0)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("build-priors", help="position prior, wrist offsets and bone table")
    _common(p)
    p.add_argument("--train", required=True, help="corpus manifest.json")
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True, help="prior JSON path; sidecars go next to it")
    p.set_defaults(fn=cmd_build_priors)

    p = sub.add_parser("train", help="train one stage")
    _common(p)
    _ablation(p)
    p.add_argument("--stage", required=True, choices=sorted(TRAIN_STAGES))
    p.add_argument("--train", required=True, help="corpus manifest.json")
    p.add_argument("--split", default="train")
    p.add_argument("--models", required=True, help="model directory (read and updated)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("synthesize", help="run the cascade and write per-stage trajectory files")
    _common(p)
    _ablation(p)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--midi")
    p.add_argument("--fingering")
    p.add_argument("--gestures", help="optional gesture-boundary CSV")
    p.add_argument("--gt", help="ground-truth .npz with joints_L / joints_R")
    p.add_argument("--manifest", help="synthesize every piece of a corpus split instead")
    p.add_argument("--split", default="test")
    p.add_argument("--through-stage", type=int, choices=sorted(THROUGH), default=4)
    p.add_argument("--tap", choices=STAGE_ORDER, help="stage whose fingertips are scored for F1")
    p.add_argument("--dump-raster", help="write the input raster as JSON")
    p.add_argument("--report")
    p.set_defaults(fn=cmd_synthesize)

    p = sub.add_parser("evaluate", help="score trajectory files against a MIDI performance")
    _common(p)
    p.add_argument("--pred", required=True, nargs="+", help="trajectory files (one per hand)")
    p.add_argument("--midi", required=True)
    p.add_argument("--fingering")
    p.add_argument("--gt", nargs="+", help="ground-truth trajectory files for position metrics")
    p.add_argument("--report")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every learned block")
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
