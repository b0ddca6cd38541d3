"""Stage 4: 21-joint hand poses from wrist and fingertip anchors.

Joint order: 0 wrist, then thumb, index, middle, ring, pinky, each as
MCP, PIP, DIP, TIP (joint ``1 + 4*finger + j``).
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .neural.blocks import FiLMGenerator, GraphConv, TemporalGraphConv, film
from .refinement import POS_SCALE, InferenceError, _masked_mean, _safe_norm
from .score import FPS

NUM_JOINTS = 21
WRIST = 0
FINGERS = ("thumb", "index", "middle", "ring", "pinky")
JOINT_NAMES = ["wrist"] + [f"{f}_{j}" for f in FINGERS for j in ("mcp", "pip", "dip", "tip")]
TIP_JOINTS = np.array([4, 8, 12, 16, 20])
MCP_JOINTS = TIP_JOINTS - 3
ANCHOR_JOINTS = np.concatenate([[WRIST], TIP_JOINTS])
INTERMEDIATE_JOINTS = np.array([j for j in range(NUM_JOINTS) if j not in set(ANCHOR_JOINTS.tolist())])

SKELETAL_EDGES = [(0 if j == 0 else 1 + 4 * f + j - 1, 1 + 4 * f + j) for f in range(5) for j in range(4)]
MCP_LINKS = [(int(a), int(b)) for a, b in zip(MCP_JOINTS[:-1], MCP_JOINTS[1:])]

# rig: fraction along wrist->tip and arch lift (as a fraction of the arch height)
RIG_FRACTIONS = (0.45, 0.70, 0.88)
RIG_ARCH_HEIGHT = 20.0

# signed flexion limits in degrees, per finger (MCP, PIP, DIP); positive bends the finger down
FLEXION_LIMITS_DEG = np.array([
    [(-60, 100), (-60, 100), (-60, 100)],   # thumb: loose, its bending axis differs
    [(-30, 90), (-10, 110), (-20, 90)],
    [(-30, 90), (-10, 110), (-20, 90)],
    [(-30, 90), (-10, 110), (-20, 90)],
    [(-30, 90), (-10, 110), (-20, 90)],
], dtype=float)
MIN_TIP_DISTANCE = 8.0
TIP_PAIRS = [(0, 1), (1, 2), (2, 3), (3, 4)]


# --------------------------------------------------------------------------
# Graph


@dataclass
class HandGraph:
    num_nodes: int
    edges: list            # all undirected edges
    skeletal_edges: list   # the 20 tree edges (parent, child)
    hop: np.ndarray        # hop distance of every node to the wrist
    partitions: np.ndarray  # 3 x V x V raw 0/1: self, centripetal, centrifugal
    adjacency: np.ndarray   # 3 x V x V normalised

    def is_connected(self) -> bool:
        return bool(np.all(self.hop >= 0))

    def degree(self, node: int, skeletal_only: bool = False) -> int:
        edges = self.skeletal_edges if skeletal_only else self.edges
        return sum(node in e for e in edges)


def build_hand_graph() -> HandGraph:
    """Skeleton tree plus MCP links, partitioned by hop distance to the wrist.

    Neighbour j of node i goes to the centripetal partition when j is closer
    to the wrist, centrifugal when farther; equal-distance neighbours (the MCP
    links) share the self partition. Each partition is column-normalised by
    the node degrees of the full adjacency (self loops included).
    """
    V = NUM_JOINTS
    edges = SKELETAL_EDGES + MCP_LINKS
    nbrs = [[] for _ in range(V)]
    for a, b in edges:
        nbrs[a].append(b)
        nbrs[b].append(a)
    hop = np.full(V, -1)
    hop[WRIST] = 0
    queue = deque([WRIST])
    while queue:
        u = queue.popleft()
        for w in nbrs[u]:
            if hop[w] < 0:
                hop[w] = hop[u] + 1
                queue.append(w)
    parts = np.zeros((3, V, V))
    for i in range(V):
        parts[0, i, i] = 1.0
        for j in nbrs[i]:
            k = 0 if hop[j] == hop[i] else (1 if hop[j] < hop[i] else 2)
            parts[k, j, i] = 1.0  # message from j into i
    total = parts.sum(axis=0)
    inv_deg = 1.0 / total.sum(axis=0)
    adjacency = parts * inv_deg[None, None, :]
    return HandGraph(V, edges, list(SKELETAL_EDGES), hop, parts, adjacency)


# --------------------------------------------------------------------------
# Geometry helpers


def kinematic_rig(wrist: np.ndarray, tips: np.ndarray, arch_height: float = RIG_ARCH_HEIGHT) -> np.ndarray:
    """T x 21 x 3 pose with intermediate joints on the wrist->tip segment, arched upward."""
    wrist = np.asarray(wrist, dtype=float)
    tips = np.asarray(tips, dtype=float)
    T = wrist.shape[0]
    pose = np.empty((T, NUM_JOINTS, 3))
    pose[:, WRIST] = wrist
    seg = tips - wrist[:, None, :]
    for f in range(5):
        base = 1 + 4 * f
        for j, a in enumerate(RIG_FRACTIONS):
            p = wrist + a * seg[:, f]
            p[:, 2] += arch_height * 4.0 * a * (1.0 - a)
            pose[:, base + j] = p
        pose[:, base + 3] = tips[:, f]
    return pose


def bone_lengths(pose) -> np.ndarray | torch.Tensor:
    """(..., 20) skeletal bone lengths."""
    parents = [a for a, _ in SKELETAL_EDGES]
    children = [b for _, b in SKELETAL_EDGES]
    if torch.is_tensor(pose):
        return _safe_norm(pose[..., children, :] - pose[..., parents, :])
    return np.linalg.norm(pose[..., children, :] - pose[..., parents, :], axis=-1)


@dataclass
class BoneTable:
    lengths: dict  # hand -> 20 reference lengths (mm)

    def __post_init__(self):
        for hand, v in self.lengths.items():
            v = np.asarray(v, dtype=float)
            if v.shape != (20,) or np.any(v <= 0):
                raise ValueError(f"bone table for {hand} must hold 20 positive lengths")
            self.lengths[hand] = v

    def reference(self, hand: str) -> np.ndarray:
        return self.lengths[hand]

    @classmethod
    def from_poses(cls, poses: dict) -> "BoneTable":
        """Median bone lengths; ``poses`` maps hand -> list of T x 21 x 3 arrays."""
        return cls({h: np.median(np.concatenate([bone_lengths(p) for p in ps]), axis=0)
                    for h, ps in poses.items()})

    def to_json(self) -> str:
        return json.dumps({"units": "mm", "bones": [list(e) for e in SKELETAL_EDGES],
                           "lengths": {h: v.tolist() for h, v in self.lengths.items()}}, indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "BoneTable":
        return cls(json.loads(Path(path).read_text())["lengths"])


def lateral_axis(pose: torch.Tensor, hand: str) -> torch.Tensor:
    """Unit axis across the palm, oriented so that downward finger curl is positive flexion."""
    sign = 1.0 if hand == "R" else -1.0
    v = (pose[..., MCP_JOINTS[4], :] - pose[..., MCP_JOINTS[1], :]) * sign
    return v / _safe_norm(v).clamp_min(1e-9)[..., None]


def flexion_angles(pose, hand: str) -> torch.Tensor:
    """(..., T, 5, 3) signed flexion (radians) at MCP, PIP, DIP of every finger."""
    pose = torch.as_tensor(pose)
    axis = lateral_axis(pose, hand)
    out = []
    for f in range(5):
        chain = [WRIST] + [1 + 4 * f + j for j in range(4)]
        angles = []
        for j in range(1, 4):
            u = pose[..., chain[j], :] - pose[..., chain[j - 1], :]
            v = pose[..., chain[j + 1], :] - pose[..., chain[j], :]
            s = (torch.cross(u, v, dim=-1) * axis).sum(-1)
            c = (u * v).sum(-1)
            angles.append(torch.atan2(s, c))
        out.append(torch.stack(angles, dim=-1))
    return torch.stack(out, dim=-2)


def biomech_penalty(pose, hand: str, valid=None) -> torch.Tensor:
    """Hinge on flexion limits plus a minimum adjacent-fingertip distance hinge."""
    pose = torch.as_tensor(pose)
    ang = flexion_angles(pose, hand)
    lim = torch.as_tensor(np.deg2rad(FLEXION_LIMITS_DEG), dtype=pose.dtype)
    hinge = F.relu(ang - lim[..., 1]) + F.relu(lim[..., 0] - ang)
    tips = pose[..., TIP_JOINTS, :]
    d = torch.stack([_safe_norm(tips[..., a, :] - tips[..., b, :]) for a, b in TIP_PAIRS], dim=-1)
    prox = F.relu(MIN_TIP_DISTANCE - d) / MIN_TIP_DISTANCE
    return _masked_mean(hinge.flatten(-2), valid) + _masked_mean(prox, valid)


@dataclass
class PoseLossTerms:
    total: torch.Tensor
    pos: torch.Tensor
    bone: torch.Tensor
    vel: torch.Tensor
    bio: torch.Tensor


def pose_loss(pred, gt, bones, hand: str = "R", lambda_bone: float = 0.5, lambda_vel: float = 0.5,
              lambda_bio: float = 0.1, fps: float = float(FPS), valid=None) -> PoseLossTerms:
    """Mean joint L2 + bone-length deviation + velocity L2 + biomechanical hinge.

    ``pred``/``gt`` are (..., T, 21, 3); ``bones`` the 20 reference lengths.
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    v = None if valid is None else torch.as_tensor(valid, dtype=torch.bool)
    ref = torch.as_tensor(np.asarray(bones), dtype=pred.dtype)
    pos = _masked_mean(_safe_norm(pred - gt), v)
    bone = _masked_mean((bone_lengths(pred) - ref).abs(), v)
    if pred.shape[-3] >= 2:
        dp = (pred[..., 1:, :, :] - pred[..., :-1, :, :]) * fps
        dg = (gt[..., 1:, :, :] - gt[..., :-1, :, :]) * fps
        vv = None if v is None else (v[..., 1:] & v[..., :-1])
        vel = _masked_mean(_safe_norm(dp - dg), vv)
    else:
        vel = torch.zeros((), dtype=pred.dtype)
    bio = biomech_penalty(pred, hand, v)
    total = pos + lambda_bone * bone + lambda_vel * vel + lambda_bio * bio
    return PoseLossTerms(total, pos, bone, vel, bio)


# --------------------------------------------------------------------------
# Networks


def pose_conditioning(hand_keys: np.ndarray, pressed10: np.ndarray, wrist: np.ndarray, geom,
                      sign: float = 1.0) -> np.ndarray:
    """T x 15 fingering summary: both hands' press flags and this hand's pressed-key Y
    relative to the wrist (``sign = -1`` for a Y-mirrored frame)."""
    pressing = hand_keys >= 0
    safe = np.where(pressing, hand_keys, 0)
    y = np.where(pressing, (sign * geom.y_centers[safe] - wrist[:, 1:2]) / POS_SCALE, 0.0)
    return np.concatenate([pressed10.astype(float), y], axis=1).astype(np.float32)


def node_features(rig: np.ndarray) -> np.ndarray:
    """T x 21 x 4: rig relative to the wrist (scaled) plus an anchor flag."""
    rel = (rig - rig[:, WRIST:WRIST + 1]) / POS_SCALE
    flag = np.zeros(rig.shape[:2] + (1,))
    flag[:, ANCHOR_JOINTS] = 1.0
    return np.concatenate([rel, flag], axis=-1).astype(np.float32)


class STBlock(nn.Module):
    """Graph convolution then temporal convolution, with a residual connection."""

    def __init__(self, channels: int, adjacency, kernel: int = 9):
        super().__init__()
        self.gcn = GraphConv(channels, channels, adjacency)
        self.tcn = TemporalGraphConv(channels, kernel)

    def forward(self, x):
        return x + self.tcn(F.gelu(self.gcn(x)))


def _film_map(x, gb):
    g, b = gb  # (B, T, C) -> (B, C, T, 1)
    return film(x, g.permute(0, 2, 1)[..., None], b.permute(0, 2, 1)[..., None])


@dataclass
class STGCNConfig:
    channels: tuple = (64, 128, 256)
    blocks: int = 2
    kernel: int = 9
    cond_dim: int = 15
    in_features: int = 4


class PoseUNet(nn.Module):
    """Encoder-decoder over (time x joints); halves time per level; FiLM on fingering per level."""

    def __init__(self, cfg: STGCNConfig, graph: Optional[HandGraph] = None):
        super().__init__()
        self.cfg = cfg
        A = torch.as_tensor((graph or build_hand_graph()).adjacency, dtype=torch.float32)
        ch = list(cfg.channels)
        self.levels = len(ch)
        self.inp = nn.Conv2d(cfg.in_features, ch[0], 1)
        self.enc = nn.ModuleList(nn.ModuleList(STBlock(c, A, cfg.kernel) for _ in range(cfg.blocks)) for c in ch)
        self.enc_film = nn.ModuleList(FiLMGenerator(cfg.cond_dim, c, 32) for c in ch)
        self.down = nn.ModuleList(nn.Conv2d(a, b, (3, 1), (2, 1), (1, 0)) for a, b in zip(ch[:-1], ch[1:]))
        self.up = nn.ModuleList(nn.Conv2d(b, a, 1) for a, b in zip(ch[:-1], ch[1:]))
        self.dec = nn.ModuleList(STBlock(c, A, cfg.kernel) for c in ch[:-1])
        self.dec_film = nn.ModuleList(FiLMGenerator(cfg.cond_dim, c, 32) for c in ch[:-1])
        self.head = nn.Conv2d(ch[0], 3, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, nodes, cond):
        """nodes (B, T, V, F), cond (B, T, C) -> residual (B, T, V, 3) in mm."""
        B, T, V, _ = nodes.shape
        m = 2 ** (self.levels - 1)
        Tp = -(-T // m) * m
        x = nodes.permute(0, 3, 1, 2)
        if Tp != T:
            x = F.pad(x, (0, 0, 0, Tp - T), mode="replicate")
            cond = F.pad(cond.transpose(1, 2), (0, Tp - T), mode="replicate").transpose(1, 2)
        conds = [cond]
        for _ in range(self.levels - 1):
            conds.append(F.avg_pool1d(conds[-1].transpose(1, 2), 2).transpose(1, 2))
        h = self.inp(x)
        skips = []
        for lvl in range(self.levels):
            for blk in self.enc[lvl]:
                h = blk(h)
            h = _film_map(h, self.enc_film[lvl](conds[lvl])[0])
            if lvl < self.levels - 1:
                skips.append(h)
                h = self.down[lvl](F.gelu(h))
        for lvl in reversed(range(self.levels - 1)):
            h = F.interpolate(h, scale_factor=(2, 1), mode="nearest")
            h = self.up[lvl](h) + skips[lvl]
            h = self.dec[lvl](h)
            h = _film_map(h, self.dec_film[lvl](conds[lvl])[0])
        out = self.head(F.gelu(h))[:, :, :T]
        return out.permute(0, 2, 3, 1) * POS_SCALE


def unet_pose_torch(model: PoseUNet, rig: torch.Tensor, nodes: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Differentiable synthesis for training: residual written to intermediate joints only."""
    res = model(nodes, cond)
    keep = torch.zeros(NUM_JOINTS, 1, dtype=rig.dtype)
    keep[INTERMEDIATE_JOINTS] = 1.0
    return rig + res * keep


def stgcn_synthesize(wrist: np.ndarray, tips: np.ndarray, cond: np.ndarray, model: Optional[PoseUNet],
                     arch_height: float = RIG_ARCH_HEIGHT) -> np.ndarray:
    """T x 21 x 3 pose; wrist and tips are copied from the inputs bit-exactly."""
    rig = kinematic_rig(wrist, tips, arch_height)
    out = rig.copy()
    if model is not None:
        with torch.no_grad():
            res = model(torch.from_numpy(node_features(rig))[None],
                        torch.from_numpy(np.asarray(cond, dtype=np.float32))[None])[0].numpy().astype(float)
        if not np.all(np.isfinite(res)):
            raise InferenceError("pose network produced non-finite output")
        out[:, INTERMEDIATE_JOINTS] = rig[:, INTERMEDIATE_JOINTS] + res[:, INTERMEDIATE_JOINTS]
    out[:, WRIST] = wrist
    out[:, TIP_JOINTS] = tips
    return out


# --------------------------------------------------------------------------
# MIDI-conditioned full-skeleton refinement


@dataclass
class PoseRefineConfig:
    channels: int = 32
    blocks: int = 2
    kernel: int = 9
    cond_dim: int = 452 + 15
    residual_soft_limit: float = 2.0
    lambda_residual: float = 1.0


class PoseRefineNet(nn.Module):
    def __init__(self, cfg: PoseRefineConfig, graph: Optional[HandGraph] = None):
        super().__init__()
        self.cfg = cfg
        A = torch.as_tensor((graph or build_hand_graph()).adjacency, dtype=torch.float32)
        self.inp = nn.Conv2d(3, cfg.channels, 1)
        self.blocks = nn.ModuleList(STBlock(cfg.channels, A, cfg.kernel) for _ in range(cfg.blocks))
        self.film = FiLMGenerator(cfg.cond_dim, cfg.channels, 64, groups=cfg.blocks)
        self.head = nn.Conv2d(cfg.channels, 3, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, pose_rel, cond):
        """pose_rel (B, T, V, 3) scaled, cond (B, T, C) -> residual (B, T, V, 3) mm."""
        h = self.inp(pose_rel.permute(0, 3, 1, 2))
        mods = self.film(cond)
        for blk, gb in zip(self.blocks, mods):
            h = _film_map(blk(h), gb)
        return self.head(F.gelu(h)).permute(0, 2, 3, 1) * POS_SCALE


def _pose_rel(pose):
    center = pose[..., :, WRIST:WRIST + 1, :].mean(axis=-3, keepdims=True) if isinstance(pose, np.ndarray) \
        else pose[..., :, WRIST:WRIST + 1, :].mean(dim=-3, keepdim=True)
    return (pose - center) / POS_SCALE


def moving_average_torch(x: torch.Tensor, radius: int) -> torch.Tensor:
    """Edge-replicated moving average over the time axis of (B, T, V, 3)."""
    B, T, V, C = x.shape
    ref = x[:, :1]
    h = (x - ref).permute(0, 2, 3, 1).reshape(B, V * C, T)
    h = F.pad(h, (radius, radius), mode="replicate")
    h = F.avg_pool1d(h, 2 * radius + 1, stride=1)
    return ref + h.reshape(B, V, C, T).permute(0, 3, 1, 2)


def restore_constraints(smoothed, pose, tip_press, refined):
    """Pressed-tip Y/Z back to the input pose; first and last frame back to pre-smoothing values."""
    is_t = torch.is_tensor(smoothed)
    out = smoothed.clone() if is_t else smoothed.copy()
    out[..., 0, :, :] = refined[..., 0, :, :]
    out[..., -1, :, :] = refined[..., -1, :, :]
    for f, j in enumerate(TIP_JOINTS):
        m = tip_press[..., f]
        if is_t:
            keep = m[..., None].to(out.dtype)
            yz = out[..., j, 1:] * (1 - keep) + pose[..., j, 1:] * keep
            out = torch.cat([out[..., :j, :],
                             torch.cat([out[..., j, :1], yz], dim=-1)[..., None, :],
                             out[..., j + 1:, :]], dim=-2)
        else:
            out[..., j, 1:][m] = pose[..., j, 1:][m]
    return out


def midi_refine_pose(pose: np.ndarray, cond: np.ndarray, model: Optional[PoseRefineNet],
                     tip_press: np.ndarray, smoothing_radius: Optional[int] = 4
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Full-skeleton residual + smoothing, then pressed-tip Y/Z and endpoint restoration.

    Returns (pose, residual). ``cond`` concatenates MIDI features and the
    fingering summary.
    """
    pose = np.asarray(pose, dtype=float)
    if model is None:
        res = np.zeros_like(pose)
    else:
        with torch.no_grad():
            res = model(torch.from_numpy(_pose_rel(pose).astype(np.float32))[None],
                        torch.from_numpy(np.asarray(cond, dtype=np.float32))[None])[0].numpy().astype(float)
    if not np.all(np.isfinite(res)):
        raise InferenceError("pose refinement produced non-finite output")
    refined = pose + res
    if smoothing_radius is None:
        return refined, res
    from .refinement import moving_average
    smoothed = moving_average(refined, smoothing_radius)
    return restore_constraints(smoothed, pose, np.asarray(tip_press, dtype=bool), refined), res


def pose_refine_torch(model: PoseRefineNet, pose: torch.Tensor, cond: torch.Tensor, tip_press: torch.Tensor,
                      smoothing_radius: Optional[int] = 4):
    res = model(_pose_rel(pose), cond)
    refined = pose + res
    if smoothing_radius is None:
        return refined, res
    smoothed = moving_average_torch(refined, smoothing_radius)
    return restore_constraints(smoothed, pose, tip_press, refined), res


def residual_penalty(res: torch.Tensor, limit: float, valid=None) -> torch.Tensor:
    return _masked_mean(F.relu(_safe_norm(res) - limit), valid)
