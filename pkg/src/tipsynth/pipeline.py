"""End-to-end orchestration: configuration, model bundles, staged inference and training.

Both hands share one set of network weights: the left hand is processed in a
Y-mirrored frame so that it looks like a right hand to every network.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .baseline import BaselineConfig, PlacementTable, synthesize_baseline
from .corpus import Corpus, Piece
from .evaluate import PieceCounts, aggregate, detect_presses, piece_counts
from .keyboard import KeyboardGeometry, PressThresholds, build_standard_keyboard
from .neural.params import ParamStore
from .neural.train import train
from .pose import (TIP_JOINTS, WRIST, BoneTable, PoseRefineConfig, PoseRefineNet, PoseUNet, STGCNConfig,
                   kinematic_rig, midi_refine_pose, node_features, pose_conditioning, pose_loss,
                   pose_refine_torch, residual_penalty, restore_constraints, stgcn_synthesize, unet_pose_torch)
from .priors import (PositionPrior, WristOffsetPrior, build_position_prior, build_wrist_offsets,
                     interpolate_missing)
from .refinement import (MIDI_FEATURE_DIM, MIRROR, POS_SCALE, ResidualBounds, RefineNet, RefineNetConfig,
                         SmootherNet, finger_features, midi_features, moving_average, refine_loss, refine_stage,
                         refine_torch, smooth_trajectory)
from .score import FingeringGrid, FrameGrid, NoteEvent, Window, make_windows
from .stitch import StitchConfig, stitch_windows
from .trajfile import TrajectoryFile
from .wrist import WristNet, WristNetConfig, base_wrist, refine_wrist, wrist_features

logger = logging.getLogger(__name__)

HANDS = ("L", "R")
STAGE_ORDER = ("1", "2.1", "2.2", "2.3", "3", "4", "4r")
STAGE_TAGS = {"1": "S1", "2.1": "S2.1", "2.2": "S2.2", "2.3": "S2.3", "3": "S3", "4": "S4", "4r": "S4R"}
# --through-stage N stops after these stages
THROUGH = {1: "1", 2: "2.3", 3: "3", 4: "4r"}
SEED_ENV = "TIPSYNTH_SEED"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[stage {stage}] {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# Configuration


@dataclass
class ModelConfig:
    refine_d_model: int = 64
    refine_depth: int = 4
    refine_heads: int = 8
    wrist_channels: int = 64
    wrist_blocks: int = 6
    wrist_kernel: int = 9
    smoother_channels: int = 16
    smoother_blocks: int = 3
    stgcn_channels: tuple = (64, 128, 256)
    stgcn_blocks: int = 2
    pose_refine_channels: int = 32


@dataclass
class TrainingConfig:
    steps_refine: int = 600
    steps_smoother: int = 300
    steps_wrist: int = 400
    steps_pose: int = 400
    steps_pose_refine: int = 200
    lr: float = 1e-3
    batch_size: int = 4
    smoother_jitter: float = 2.0


@dataclass
class PipelineConfig:
    """Every knob of the pipeline. Defaults are the documented operating point."""
    seed: int = 0
    keyboard: Optional[str] = None
    model_dir: Optional[str] = None
    fingertip_clamp: float = 80.0
    wrist_clamp: float = 50.0
    lambda_pos: float = 1.0
    lambda_vel: float = 0.5
    lambda_bone: float = 0.5
    lambda_pose_vel: float = 0.5
    lambda_bio: float = 0.1
    lambda_pose_residual: float = 1.0
    pose_residual_limit: float = 2.0
    smoothing_radius: int = 4
    learned_smoother: bool = True
    y_mask: bool = True
    conditioning: str = "raw"
    fusion: str = "film"
    hover_mm: float = 14.0
    prior_min_count: int = 10
    onset_tol_ms: float = 100.0
    min_frames: int = 2
    tap: str = "2.2"
    white_threshold: float = -1.19
    black_threshold: float = 10.38
    stitch_order: int = 4
    stitch_cutoff_hz: float = 6.0
    stitch_seam_radius: int = 12
    models: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if isinstance(self.models, dict):
            m = dict(self.models)
            if "stgcn_channels" in m:
                m["stgcn_channels"] = tuple(m["stgcn_channels"])
            self.models = ModelConfig(**m)
        if isinstance(self.training, dict):
            self.training = TrainingConfig(**self.training)
        self.validate()

    def validate(self) -> None:
        if not (self.fingertip_clamp > 0 and self.wrist_clamp > 0):
            raise ValueError("clamps must be positive")
        if self.smoothing_radius < 1:
            raise ValueError("smoothing_radius must be at least 1")
        if self.conditioning not in ("raw", "none"):
            raise ValueError("conditioning must be 'raw' or 'none'")
        if self.fusion not in ("film", "concat"):
            raise ValueError("fusion must be 'film' or 'concat'")
        if self.tap not in STAGE_ORDER:
            raise ValueError(f"tap must be one of {STAGE_ORDER}")
        if self.min_frames < 1 or self.onset_tol_ms <= 0:
            raise ValueError("evaluator knobs out of range")
        for name in ("lambda_pos", "lambda_vel", "lambda_bone", "lambda_pose_vel", "lambda_bio"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for p in (self.keyboard,):
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(p)

    @property
    def bounds(self) -> ResidualBounds:
        return ResidualBounds(self.fingertip_clamp, self.wrist_clamp)

    @property
    def stitch(self) -> StitchConfig:
        return StitchConfig(self.stitch_order, self.stitch_cutoff_hz, self.stitch_seam_radius)

    @property
    def thresholds(self) -> PressThresholds:
        return PressThresholds(self.white_threshold, self.black_threshold)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path=None, env: Optional[dict] = None) -> "PipelineConfig":
        """Read a JSON config (or defaults) and apply the seed override from the environment."""
        d = json.loads(Path(path).read_text()) if path else {}
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            d["seed"] = int(env[SEED_ENV])
        return cls.from_dict(d)


def load_geometry(cfg: PipelineConfig) -> KeyboardGeometry:
    geom = KeyboardGeometry.from_json(cfg.keyboard) if cfg.keyboard else build_standard_keyboard()
    return geom


# --------------------------------------------------------------------------
# Models


@dataclass
class ModelBundle:
    prior: Optional[PositionPrior] = None
    wrist_offsets: Optional[WristOffsetPrior] = None
    bones: Optional[BoneTable] = None
    refine21: Optional[RefineNet] = None
    refine22: Optional[RefineNet] = None
    smoother: Optional[SmootherNet] = None
    wrist: Optional[WristNet] = None
    pose: Optional[PoseUNet] = None
    pose_refine: Optional[PoseRefineNet] = None
    losses: dict = field(default_factory=dict)

    NETS = ("refine21", "refine22", "smoother", "wrist", "pose", "pose_refine")

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        if self.prior is not None:
            self.prior.save(root / "prior.json")
        if self.wrist_offsets is not None:
            (root / "wrist_offsets.json").write_text(json.dumps(self.wrist_offsets.to_dict(), indent=1))
        if self.bones is not None:
            self.bones.save(root / "bones.json")
        for name in self.NETS:
            net = getattr(self, name)
            if net is not None:
                ParamStore.from_module(net, meta={"net": name, "config": _net_config(net)}).save(root / f"{name}.tpnn")
        if self.losses:
            (root / "losses.json").write_text(json.dumps(self.losses))

    @classmethod
    def load(cls, root) -> "ModelBundle":
        root = Path(root)
        b = cls()
        if (root / "prior.json").exists():
            b.prior = PositionPrior.load(root / "prior.json")
        if (root / "wrist_offsets.json").exists():
            b.wrist_offsets = WristOffsetPrior.from_dict(json.loads((root / "wrist_offsets.json").read_text()))
        if (root / "bones.json").exists():
            b.bones = BoneTable.load(root / "bones.json")
        for name in cls.NETS:
            path = root / f"{name}.tpnn"
            if path.exists():
                store = ParamStore.load(path)
                net = _build_net(name, store.meta["config"])
                store.apply_to(net)
                net.eval()
                setattr(b, name, net)
        return b


def _net_config(net) -> dict:
    if isinstance(net, SmootherNet):
        return dict(net.config)
    return asdict(net.cfg)


def _build_net(name: str, cfg: dict):
    if name in ("refine21", "refine22"):
        return RefineNet(RefineNetConfig(**cfg))
    if name == "smoother":
        return SmootherNet(**cfg)
    if name == "wrist":
        return WristNet(WristNetConfig(**cfg))
    if name == "pose":
        cfg = dict(cfg, channels=tuple(cfg["channels"]))
        return PoseUNet(STGCNConfig(**cfg))
    if name == "pose_refine":
        return PoseRefineNet(PoseRefineConfig(**cfg))
    raise ValueError(name)


def make_net(name: str, cfg: PipelineConfig):
    m = cfg.models
    midi_dim = MIDI_FEATURE_DIM if cfg.conditioning == "raw" else 0
    if name == "refine21":
        return RefineNet(RefineNetConfig(m.refine_d_model, m.refine_depth, m.refine_heads, fusion=cfg.fusion))
    if name == "refine22":
        return RefineNet(RefineNetConfig(m.refine_d_model, m.refine_depth, m.refine_heads,
                                         cond_dim=midi_dim, fusion=cfg.fusion))
    if name == "smoother":
        return SmootherNet(m.smoother_channels, m.smoother_blocks)
    if name == "wrist":
        return WristNet(WristNetConfig(m.wrist_channels, m.wrist_blocks, m.wrist_kernel, midi_dim, cfg.fusion))
    if name == "pose":
        return PoseUNet(STGCNConfig(tuple(m.stgcn_channels), m.stgcn_blocks))
    if name == "pose_refine":
        return PoseRefineNet(PoseRefineConfig(m.pose_refine_channels, cond_dim=midi_dim + 15,
                                              residual_soft_limit=cfg.pose_residual_limit,
                                              lambda_residual=cfg.lambda_pose_residual))
    raise ValueError(name)


# --------------------------------------------------------------------------
# Inference


@dataclass
class PieceInput:
    name: str
    notes: list
    fingering: FingeringGrid

    @property
    def T(self) -> int:
        return self.fingering.T

    @classmethod
    def from_piece(cls, p: Piece) -> "PieceInput":
        return cls(p.name, p.notes, p.fingering)


@dataclass
class ResidualStats:
    """Largest post-clamp residual component seen per stage."""
    max_abs: dict = field(default_factory=dict)
    pose_residual_sum: float = 0.0
    pose_residual_count: int = 0

    def track(self, stage: str, residual: np.ndarray) -> None:
        v = float(np.abs(residual).max()) if residual.size else 0.0
        self.max_abs[stage] = max(self.max_abs.get(stage, 0.0), v)

    @property
    def mean_pose_residual(self) -> Optional[float]:
        return self.pose_residual_sum / self.pose_residual_count if self.pose_residual_count else None


@dataclass
class PipelineResult:
    name: str
    stages: dict      # stage -> hand -> array
    stats: ResidualStats

    def tips(self, stage: str) -> dict:
        out = self.stages[stage]
        return {h: (v[:, TIP_JOINTS] if v.ndim == 3 and v.shape[1] == 21 else v) for h, v in out.items()}

    @property
    def last_stage(self) -> str:
        return [s for s in STAGE_ORDER if s in self.stages][-1]


def _take_edge(arr: np.ndarray, w: Window) -> np.ndarray:
    out = np.empty((w.length,) + arr.shape[1:], dtype=float)
    out[:w.valid] = arr[w.start:w.stop]
    out[w.valid:] = arr[w.stop - 1]
    return out


def _take_keys(keys: np.ndarray, w: Window) -> np.ndarray:
    out = np.full((w.length,) + keys.shape[1:], -1, dtype=keys.dtype)
    out[:w.valid] = keys[w.start:w.stop]
    return out


def _mirror(hand: str) -> np.ndarray:
    return MIRROR if hand == "L" else np.ones(3)


def _pressed10(keys: dict, hand: str) -> np.ndarray:
    other = "R" if hand == "L" else "L"
    return np.concatenate([keys[hand] >= 0, keys[other] >= 0], axis=1)


def run_pipeline(inp: PieceInput, bundle: ModelBundle, cfg: PipelineConfig, geom: KeyboardGeometry,
                 stop_after: str = "4r") -> PipelineResult:
    """Run stages in order up to ``stop_after`` and return every stage's full-length output."""
    if stop_after not in STAGE_ORDER:
        raise ValueError(f"unknown stage {stop_after}")
    last = STAGE_ORDER.index(stop_after)
    T = inp.T
    grid = FrameGrid(T)
    windows = make_windows(T)
    keys = {h: inp.fingering.hand_keys(h) for h in HANDS}
    press = {h: keys[h] >= 0 for h in HANDS}
    stages: dict = {}
    stats = ResidualStats()
    scfg = cfg.stitch
    current = "1"
    try:
        if bundle.prior is None:
            raise ValueError("no position prior available")
        table = PlacementTable(bundle.prior, geom)
        stages["1"] = synthesize_baseline(inp.fingering, table, BaselineConfig(hover_mm=cfg.hover_mm))
        if last < 1:
            return PipelineResult(inp.name, stages, stats)
        midi = midi_features(inp.notes, grid)

        for stage, net_name, use_midi in (("2.1", "refine21", False), ("2.2", "refine22", True)):
            current = stage
            prev = stages[STAGE_ORDER[STAGE_ORDER.index(stage) - 1]]
            model = getattr(bundle, net_name)
            out = {}
            for h in HANDS:
                outs = []
                for w in windows:
                    mf = w.take(midi) if (use_midi and model is not None and model.cfg.cond_dim) else None
                    ro = refine_stage(_take_edge(prev[h], w), _take_keys(keys[h], w), geom, model, mf,
                                      cfg.bounds, cfg.y_mask, w.valid_mask, mirror=(h == "L"))
                    stats.track(stage, ro.residual[:w.valid])
                    outs.append(ro.trajectory)
                out[h] = stitch_windows(outs, windows, T, press[h], scfg)
            stages[stage] = out
            if last <= STAGE_ORDER.index(stage):
                return PipelineResult(inp.name, stages, stats)

        current = "2.3"
        smoother = bundle.smoother if cfg.learned_smoother else None
        stages["2.3"] = {h: smooth_trajectory(stages["2.2"][h], press[h] if cfg.y_mask else None,
                                              cfg.smoothing_radius, smoother) for h in HANDS}
        if last <= STAGE_ORDER.index("2.3"):
            return PipelineResult(inp.name, stages, stats)

        current = "3"
        if bundle.wrist_offsets is None:
            raise ValueError("no wrist offset prior available")
        tips = stages["2.3"]
        wr = {}
        for h in HANDS:
            m = _mirror(h)
            base = base_wrist(tips[h], keys[h], bundle.wrist_offsets, h, geom)
            p10 = _pressed10(keys, h)
            outs = []
            for w in windows:
                b = _take_edge(base, w)
                raw = np.zeros_like(b)
                if bundle.wrist is not None:
                    tp = _take_edge(tips[h], w) * m
                    bm = b * m
                    center = bm[:w.valid].mean(axis=0)
                    feats = wrist_features(bm, tp, _take_keys(p10.astype(int), w) > 0, _take_keys(keys[h], w),
                                           geom, center, m[1])
                    cond = w.take(midi) if bundle.wrist.cfg.cond_dim else None
                    with torch.no_grad():
                        c = None if cond is None else torch.from_numpy(cond.astype(np.float32))[None]
                        raw = bundle.wrist(torch.from_numpy(feats)[None], c)[0].numpy().astype(float) * m
                out_w, res = refine_wrist(b, None, None, bounds=cfg.bounds, smoothing_radius=None, raw_residual=raw)
                stats.track("3", res[:w.valid])
                outs.append(out_w)
            stitched = stitch_windows(outs, windows, T, None, scfg)
            wr[h] = smooth_trajectory(stitched[:, None, :], None, cfg.smoothing_radius, smoother)[:, 0, :]
        stages["3"] = wr
        if last <= STAGE_ORDER.index("3"):
            return PipelineResult(inp.name, stages, stats)

        current = "4"
        poses = {}
        for h in HANDS:
            m = _mirror(h)
            p10 = _pressed10(keys, h)
            outs = []
            for w in windows:
                wm = _take_edge(wr[h], w) * m
                tm = _take_edge(tips[h], w) * m
                cond = pose_conditioning(_take_keys(keys[h], w), _take_keys(p10.astype(int), w) > 0, wm, geom, m[1])
                outs.append(stgcn_synthesize(wm, tm, cond, bundle.pose) * m)
            pose = stitch_windows(outs, windows, T, None, scfg)
            pose[:, WRIST] = wr[h]
            pose[:, TIP_JOINTS] = tips[h]
            poses[h] = pose
        stages["4"] = poses
        if last <= STAGE_ORDER.index("4"):
            return PipelineResult(inp.name, stages, stats)

        current = "4r"
        final = {}
        for h in HANDS:
            m = _mirror(h)
            p10 = _pressed10(keys, h)
            outs = []
            for w in windows:
                pm = _take_edge(poses[h], w) * m
                kw = _take_keys(keys[h], w)
                pc = pose_conditioning(kw, _take_keys(p10.astype(int), w) > 0, pm[:, WRIST], geom, m[1])
                mf = w.take(midi) if cfg.conditioning == "raw" else np.zeros((w.length, 0), np.float32)
                cond = np.concatenate([mf, pc], axis=1)
                refined, res = midi_refine_pose(pm, cond, bundle.pose_refine, kw >= 0, smoothing_radius=None)
                r = np.linalg.norm(res[:w.valid], axis=-1)
                stats.pose_residual_sum += float(r.sum())
                stats.pose_residual_count += r.size
                outs.append(refined * m)
            stitched = stitch_windows(outs, windows, T, None, scfg)
            smoothed = moving_average(stitched, cfg.smoothing_radius)
            final[h] = restore_constraints(smoothed, poses[h], press[h], stitched)
        stages["4r"] = final
        return PipelineResult(inp.name, stages, stats)
    except PipelineError:
        raise
    except Exception as e:  # attach the stage tag; completed stages stay in the exception
        err = PipelineError(current, f"{type(e).__name__}: {e}")
        err.partial = PipelineResult(inp.name, stages, stats)
        raise err from e


def write_stage_files(result: PipelineResult, out_dir, stages: Optional[Sequence[str]] = None) -> list[Path]:
    """One TPTJ file per stage and hand under ``out_dir/<stage tag>/``."""
    out_dir = Path(out_dir)
    written = []
    for stage in stages or list(result.stages):
        tag = STAGE_TAGS[stage]
        d = out_dir / tag
        d.mkdir(parents=True, exist_ok=True)
        for h, arr in result.stages[stage].items():
            data = arr[:, None, :] if arr.ndim == 2 else arr
            path = d / f"{result.name}_{h}.tptj"
            TrajectoryFile(data.astype(np.float32), h, tag).save(path)
            written.append(path)
    return written


# --------------------------------------------------------------------------
# Evaluation


def tap_tips(result: PipelineResult, tap: str) -> dict:
    stage = tap if tap in result.stages else result.last_stage
    return result.tips(stage)


def evaluate_result(result: PipelineResult, notes: Sequence[NoteEvent], cfg: PipelineConfig,
                    geom: KeyboardGeometry, gt_joints: Optional[dict] = None, group: str = "all") -> PieceCounts:
    tips = tap_tips(result, cfg.tap)
    events = []
    for h in HANDS:
        events += detect_presses(tips[h], geom, cfg.thresholds, cfg.min_frames, hand=h)
    last = result.last_stage
    pred = result.stages[last]
    if gt_joints is not None:
        if last in ("4", "4r"):
            gt = gt_joints
        elif last == "3":
            pred = {h: v[:, None, :] for h, v in pred.items()}
            gt = {h: v[:, :1] for h, v in gt_joints.items()}
        else:
            gt = {h: v[:, TIP_JOINTS] for h, v in gt_joints.items()}
    else:
        pred = gt = None
    return piece_counts(result.name, events, notes, pred, gt, group, cfg.onset_tol_ms)


def evaluate_corpus(pieces: Sequence[Piece], bundle: ModelBundle, cfg: PipelineConfig, geom: KeyboardGeometry,
                    stop_after: str = "4r", out_dir=None, clean_gt: bool = True):
    """Run and score every piece; returns (report, per-piece results)."""
    counts, results = [], []
    for p in sorted(pieces, key=lambda p: p.name):
        res = run_pipeline(PieceInput.from_piece(p), bundle, cfg, geom, stop_after)
        if out_dir is not None:
            write_stage_files(res, out_dir)
        counts.append(evaluate_result(res, p.notes, cfg, geom, p.clean_joints if clean_gt else p.joints, p.split))
        results.append(res)
    report = aggregate(counts, config=cfg.to_dict())
    return report, results


# --------------------------------------------------------------------------
# Training


def build_priors(pieces: Sequence[Piece], cfg: PipelineConfig, geom: KeyboardGeometry) -> ModelBundle:
    """Position prior, wrist offsets and bone table from the given (training) pieces."""
    tips = [p.tips() for p in pieces]
    fings = [p.fingering for p in pieces]
    prior = interpolate_missing(build_position_prior(tips, fings, cfg.prior_min_count), geom)
    offsets = build_wrist_offsets([p.wrist() for p in pieces], tips, fings, geom)
    bones = BoneTable.from_poses({h: [p.joints[h] for p in pieces] for h in HANDS})
    return ModelBundle(prior, offsets, bones)


def _stack(items: list, key: str) -> torch.Tensor:
    return torch.from_numpy(np.stack([it[key] for it in items]))


def _collate(items: list) -> dict:
    return {k: _stack(items, k) for k in items[0] if items[0][k] is not None}


def _windows_of(pieces, fn):
    """Apply ``fn(piece, hand, window, mirror)`` to every training window and hand."""
    out = []
    for p in sorted(pieces, key=lambda p: p.name):
        for w in make_windows(p.T):
            for h in HANDS:
                item = fn(p, h, w, _mirror(h))
                if item is not None:
                    out.append(item)
    return out


STAGE_SEED_OFFSET = {"2.1": 21, "2.2": 22, "2.3": 23, "3": 3, "4": 4, "4r": 41}


def train_stage(stage: str, pieces: Sequence[Piece], bundle: ModelBundle, cfg: PipelineConfig,
                geom: KeyboardGeometry) -> ModelBundle:
    """Train one learned stage on ``pieces``, feeding it the current bundle's upstream outputs."""
    if bundle.prior is None:
        raise PipelineError(stage, "priors must be built before training")
    seed = cfg.seed * 1000 + STAGE_SEED_OFFSET[stage]
    torch.manual_seed(seed)
    tc = cfg.training
    pieces = sorted(pieces, key=lambda p: p.name)
    upstream = STAGE_ORDER[STAGE_ORDER.index(stage) - 1]
    runs = {p.name: run_pipeline(PieceInput.from_piece(p), bundle, cfg, geom, upstream) for p in pieces}
    midis = {p.name: midi_features(p.notes, FrameGrid(p.T)) for p in pieces}
    t0 = time.time()

    if stage in ("2.1", "2.2"):
        net_name = "refine21" if stage == "2.1" else "refine22"
        model = make_net(net_name, cfg)
        use_midi = stage == "2.2" and model.cfg.cond_dim > 0

        def sample(p, h, w, m):
            traj = _take_edge(runs[p.name].stages[upstream][h], w) * m
            keys = _take_keys(p.fingering.hand_keys(h), w)
            valid = w.valid_mask
            center = traj[valid].mean(axis=(0, 1))
            return {"traj": traj.astype(np.float32), "gt": (_take_edge(p.tips()[h], w) * m).astype(np.float32),
                    "fing": finger_features(keys, geom, center[1], m[1]), "press": keys >= 0, "valid": valid,
                    "midi": w.take(midis[p.name]) if use_midi else None}

        data = _windows_of(pieces, sample)

        def loss_fn(model, b):
            pred, _ = refine_torch(model, b["traj"], b["fing"], b.get("midi"), b["valid"], b["press"],
                                   cfg.fingertip_clamp, cfg.y_mask)
            return refine_loss(pred, b["gt"], cfg.lambda_pos, cfg.lambda_vel, valid=b["valid"])
        steps = tc.steps_refine

    elif stage == "2.3":
        net_name = "smoother"
        model = make_net(net_name, cfg)

        def sample(p, h, w, m):
            return {"gt": (_take_edge(p.tips()[h], w) * m).astype(np.float32), "valid": w.valid_mask}

        data = _windows_of(pieces, sample)

        def loss_fn(model, b):
            gt = b["gt"]
            B, T = gt.shape[:2]
            noisy = gt + tc.smoother_jitter * torch.randn(gt.shape)
            tracks = noisy.reshape(B, T, 15).transpose(1, 2).reshape(B * 15, T)
            ref = tracks.mean(dim=1, keepdim=True)
            out = model((tracks - ref) / POS_SCALE) * POS_SCALE + ref
            pred = out.reshape(B, 15, T).transpose(1, 2).reshape(B, T, 5, 3)
            return refine_loss(pred, gt, cfg.lambda_pos, cfg.lambda_vel, valid=b["valid"])
        steps = tc.steps_smoother

    elif stage == "3":
        net_name = "wrist"
        model = make_net(net_name, cfg)
        use_midi = model.cfg.cond_dim > 0

        def sample(p, h, w, m):
            keys_all = {hh: p.fingering.hand_keys(hh) for hh in HANDS}
            tips = runs[p.name].stages["2.3"][h]
            base = base_wrist(tips, keys_all[h], bundle.wrist_offsets, h, geom)
            b = _take_edge(base, w) * m
            valid = w.valid_mask
            center = b[valid].mean(axis=0)
            feats = wrist_features(b, _take_edge(tips, w) * m, _take_keys(_pressed10(keys_all, h).astype(int), w) > 0,
                                   _take_keys(keys_all[h], w), geom, center, m[1])
            return {"base": b.astype(np.float32), "feats": feats, "valid": valid,
                    "gt": (_take_edge(p.wrist()[h], w) * m).astype(np.float32),
                    "midi": w.take(midis[p.name]) if use_midi else None}

        data = _windows_of(pieces, sample)

        def loss_fn(model, b):
            res = torch.clamp(model(b["feats"], b.get("midi")), -cfg.wrist_clamp, cfg.wrist_clamp)
            pred = (b["base"] + res)[:, :, None, :]
            return refine_loss(pred, b["gt"][:, :, None, :], cfg.lambda_pos, cfg.lambda_vel, valid=b["valid"])
        steps = tc.steps_wrist

    elif stage == "4":
        net_name = "pose"
        model = make_net(net_name, cfg)
        bones = torch.as_tensor(bundle.bones.reference("R"), dtype=torch.float32)

        def sample(p, h, w, m):
            keys_all = {hh: p.fingering.hand_keys(hh) for hh in HANDS}
            gt = _take_edge(p.joints[h], w) * m
            rig = kinematic_rig(gt[:, WRIST], gt[:, TIP_JOINTS])
            cond = pose_conditioning(_take_keys(keys_all[h], w),
                                     _take_keys(_pressed10(keys_all, h).astype(int), w) > 0, gt[:, WRIST], geom, m[1])
            return {"rig": rig.astype(np.float32), "nodes": node_features(rig), "cond": cond,
                    "gt": gt.astype(np.float32), "valid": w.valid_mask}

        data = _windows_of(pieces, sample)

        def loss_fn(model, b):
            pred = unet_pose_torch(model, b["rig"], b["nodes"], b["cond"])
            return pose_loss(pred, b["gt"], bones, "R", cfg.lambda_bone, cfg.lambda_pose_vel, cfg.lambda_bio,
                             valid=b["valid"]).total
        steps = tc.steps_pose

    elif stage == "4r":
        net_name = "pose_refine"
        model = make_net(net_name, cfg)
        bones = torch.as_tensor(bundle.bones.reference("R"), dtype=torch.float32)

        def sample(p, h, w, m):
            keys_all = {hh: p.fingering.hand_keys(hh) for hh in HANDS}
            pose = _take_edge(runs[p.name].stages["4"][h], w) * m
            kw = _take_keys(keys_all[h], w)
            pc = pose_conditioning(kw, _take_keys(_pressed10(keys_all, h).astype(int), w) > 0, pose[:, WRIST], geom, m[1])
            mf = w.take(midis[p.name]) if cfg.conditioning == "raw" else np.zeros((w.length, 0), np.float32)
            return {"pose": pose.astype(np.float32), "cond": np.concatenate([mf, pc], axis=1).astype(np.float32),
                    "press": kw >= 0, "gt": (_take_edge(p.joints[h], w) * m).astype(np.float32),
                    "valid": w.valid_mask}

        data = _windows_of(pieces, sample)

        def loss_fn(model, b):
            out, res = pose_refine_torch(model, b["pose"], b["cond"], b["press"], cfg.smoothing_radius)
            terms = pose_loss(out, b["gt"], bones, "R", cfg.lambda_bone, cfg.lambda_pose_vel, cfg.lambda_bio,
                              valid=b["valid"])
            return terms.total + cfg.lambda_pose_residual * residual_penalty(res, cfg.pose_residual_limit, b["valid"])
        steps = tc.steps_pose_refine
    else:
        raise ValueError(f"stage {stage} has nothing to train")

    result = train(model, data, loss_fn, steps, seed, lr=tc.lr, batch_size=tc.batch_size, collate=_collate,
                   meta={"stage": stage})
    setattr(bundle, net_name, model)
    bundle.losses[stage] = result.losses
    logger.info("stage %s: %d windows, %d steps, loss %.3f -> %.3f (%.1fs)", stage, len(data), steps,
                result.losses[0], result.losses[-1], time.time() - t0)
    return bundle


LEARNED_STAGES = ("2.1", "2.2", "2.3", "3", "4", "4r")


def train_all(pieces: Sequence[Piece], cfg: PipelineConfig, geom: KeyboardGeometry,
              stages: Sequence[str] = LEARNED_STAGES, bundle: Optional[ModelBundle] = None) -> ModelBundle:
    bundle = bundle or build_priors(pieces, cfg, geom)
    for s in stages:
        if s == "2.3" and not cfg.learned_smoother:
            continue
        train_stage(s, pieces, bundle, cfg, geom)
    return bundle
