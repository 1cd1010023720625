"""Synthetic multi-view sequences of a detailed capsule body.

The ground-truth body is the capsule-union SDF plus a bounded displacement
made of seeded sine bumps along the limbs, with a procedural albedo. Frames
are sphere-traced in observation space through the same backward skinning
the model uses, so the GT never depends on the learned representation.
"""

from __future__ import annotations

import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from .body import BodyPrior, Pose, bone_softmax_weights, build_body_prior, capsule_union_sdf, interpolate_pose
from .body.prior import capsule_segments, merge_body_config, skeleton_from_config
from .deform import initial_weights, iterative_backward_deform
from .geometry import crossing_table, marching_cubes, save_obj
from .io.dataset import frame_name, save_cameras, save_pose, view_name
from .io.images import save_mask, save_png
from .render import Camera, FrameContext, generate_rays, image_pixels

DISP_AMPLITUDE = 0.015
N_BUMPS = 8
TRACE_STEPS = 64
TRACE_EPS = 1e-4
TRACE_STEP_FACTOR = 0.8
LIGHT = np.array([0.3, 0.8, 0.6]) / np.linalg.norm([0.3, 0.8, 0.6])

DEFAULT_SYNTH = {
    "n_frames": 30,
    "n_views": 4,
    "n_unseen": 5,
    "width": 128,
    "height": 128,
    "seed": 0,
    "radius": 3.0,
    "focal_scale": 1.35,
    "look_at": [0.0, -0.05, 0.0],
    "pose_sigma": 0.25,
    "frames_per_key": 10,
    "bg": [1.0, 1.0, 1.0],
    "gt_voxel": 0.0125,
    "body": {},
}


def merge_synth_config(cfg: dict | None) -> dict:
    cfg = cfg or {}
    unknown = set(cfg) - set(DEFAULT_SYNTH)
    if unknown:
        raise KeyError(f"unknown synth config key(s): {sorted(unknown)}")
    return {**copy.deepcopy(DEFAULT_SYNTH), **copy.deepcopy(cfg)}


# ------------------------------------------------------------------ GT body


@dataclass
class Bump:
    a: np.ndarray
    b: np.ndarray
    radius: float
    amplitude: float
    freq: float
    phase: float


class GroundTruthBody:
    """Canonical GT SDF and albedo."""

    def __init__(self, body_cfg: dict, seed: int = 0):
        self.cfg = body_cfg
        rng = np.random.default_rng(seed)
        segs = capsule_segments(body_cfg, skeleton_from_config(body_cfg).rest_joints())
        pick = rng.choice(len(segs), size=min(N_BUMPS, len(segs)), replace=False)
        self.bumps = [
            Bump(segs[i][0], segs[i][1], segs[i][2], rng.uniform(0.006, 0.012), rng.uniform(1.5, 4.0),
                 rng.uniform(0, 2 * math.pi))
            for i in pick
        ]
        self.tint = rng.uniform(-0.08, 0.08, size=3)

    def displacement(self, p: np.ndarray) -> np.ndarray:
        total = np.zeros(len(p))
        for bp in self.bumps:
            ab = bp.b - bp.a
            t = np.clip(((p - bp.a) @ ab) / max(ab @ ab, 1e-18), 0.0, 1.0)
            d = np.linalg.norm(p - (bp.a + t[:, None] * ab), axis=1)
            total += bp.amplitude * np.sin(2 * math.pi * bp.freq * t + bp.phase) * np.exp(-(((d - bp.radius) / 0.05) ** 2))
        return DISP_AMPLITUDE * np.tanh(total / DISP_AMPLITUDE)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        return capsule_union_sdf(self.cfg, p) + self.displacement(p)

    def normal(self, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
        g = np.stack([self.sdf(p + h * e) - self.sdf(p - h * e) for e in np.eye(3)], axis=1)
        return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)

    def albedo(self, p: np.ndarray) -> np.ndarray:
        y = p[:, 1]
        skin = np.array([0.85, 0.66, 0.55])
        shirt = np.array([0.25, 0.45, 0.75]) + self.tint
        pants = np.array([0.30, 0.28, 0.35])
        torso = 1.0 / (1.0 + np.exp(-(y + 0.08) / 0.02)) * (1.0 / (1.0 + np.exp((y - 0.33) / 0.02)))
        arms = 1.0 / (1.0 + np.exp((np.abs(p[:, 0]) - 0.45) / 0.03))
        top = (torso * arms)[:, None]
        legs = (1.0 / (1.0 + np.exp((y + 0.1) / 0.02)) * (1.0 / (1.0 + np.exp(-(y + 0.85) / 0.02))))[:, None]
        stripes = 0.08 * np.sin(2 * math.pi * 8.0 * y)[:, None]
        c = skin * (1 - top - legs) + (shirt + stripes) * top + pants * legs
        return np.clip(c, 0.0, 1.0)

    def mesh(self, voxel: float):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.cfg["sdf"]["bbox"])
        res = np.maximum(np.ceil((hi - lo) / voxel).astype(int) + 1, 2)
        return marching_cubes(self.sdf, lo, hi, res, 0.0)


# ------------------------------------------------------------------ tracing


class _Tracer:
    def __init__(self, gt: GroundTruthBody, prior: BodyPrior, ctx: FrameContext):
        self.gt, self.prior, self.ctx = gt, prior, ctx
        skel_cfg = prior.config["skeleton"]
        skin = prior.config["skinning"]
        leaf = skel_cfg.get("leaf_length", 0.08)
        self.weight_fn = lambda x: torch.from_numpy(
            bone_softmax_weights(prior.skeleton, x.numpy(), leaf, skin["temperature"], skin["top_k"])
        )
        self.B_inv = torch.from_numpy(ctx.B_inv)

    def to_canonical(self, x_obs: np.ndarray):
        w0 = torch.from_numpy(initial_weights(x_obs, self.ctx.knn, self.prior.weights, 10))
        res = iterative_backward_deform(torch.from_numpy(x_obs), w0, self.B_inv, self.weight_fn, 3, check=False)
        return res.x_cnl.numpy(), res.blend.numpy()

    def sdf(self, x_obs: np.ndarray) -> np.ndarray:
        return self.gt.sdf(self.to_canonical(x_obs)[0])


def trace_view(gt: GroundTruthBody, prior: BodyPrior, ctx: FrameContext, cam: Camera, bg):
    """Sphere-trace one view; returns (rgb (H, W, 3), mask (H, W) bool)."""
    H, W = cam.height, cam.width
    o, d = generate_rays(cam, image_pixels(W, H))
    table, counts = crossing_table(ctx.bvh, o, d)
    rgb = np.tile(np.asarray(bg, dtype=np.float64), (H * W, 1))
    hit = np.zeros(H * W, dtype=bool)
    active = np.nonzero(counts > 0)[0]
    if len(active) == 0:
        return rgb.reshape(H, W, 3), hit.reshape(H, W)
    t = table[active, 0].copy()
    t_end = table[active, counts[active] - 1].copy()
    tracer = _Tracer(gt, prior, ctx)
    done = np.zeros(len(active), dtype=bool)
    for _ in range(TRACE_STEPS):
        live = np.nonzero(~done)[0]
        if len(live) == 0:
            break
        x = o[active[live]] + t[live, None] * d[active[live]]
        s = tracer.sdf(x)
        conv = np.abs(s) < TRACE_EPS
        hit[active[live[conv]]] = True
        done[live[conv]] = True
        step = ~conv
        t[live[step]] += TRACE_STEP_FACTOR * s[step]
        done[live[step][t[live[step]] > t_end[live[step]]]] = True
    idx = np.nonzero(hit)[0]
    if len(idx):
        pos = {r: i for i, r in enumerate(active)}
        ti = t[[pos[r] for r in idx]]
        x_obs = o[idx] + ti[:, None] * d[idx]
        x_cnl, M = tracer.to_canonical(x_obs)
        n_cnl = gt.normal(x_cnl)
        n_obs = np.einsum("nba,nb->na", M[:, :3, :3], n_cnl)  # A^T n
        n_obs /= np.maximum(np.linalg.norm(n_obs, axis=1, keepdims=True), 1e-12)
        shade = 0.6 + 0.4 * np.maximum(0.0, n_obs @ LIGHT)
        rgb[idx] = gt.albedo(x_cnl) * shade[:, None]
    return rgb.reshape(H, W, 3), hit.reshape(H, W)


# ------------------------------------------------------------------ cameras and motion


def ring_cameras(n: int, radius: float, width: int, height: int, focal_scale: float, target) -> list[Camera]:
    cams = []
    target = np.asarray(target, dtype=np.float64)
    for i in range(n):
        a = 2 * math.pi * i / n
        eye = target + radius * np.array([math.sin(a), 0.0, math.cos(a)])
        f = focal_scale * width
        cams.append(Camera.look_at(eye, target, [0.0, 1.0, 0.0], f, f, width, height))
    return cams


_POSE_SCALE = {  # relative articulation per joint name
    "left_hip": 1.0, "right_hip": 1.0, "left_knee": 1.0, "right_knee": 1.0,
    "left_shoulder": 1.2, "right_shoulder": 1.2, "left_elbow": 1.2, "right_elbow": 1.2,
    "spine1": 0.3, "spine2": 0.3, "spine3": 0.3, "neck": 0.4, "head": 0.4,
    "left_collar": 0.3, "right_collar": 0.3,
}


def key_poses(names: list[str], n_keys: int, sigma: float, rng: np.random.Generator) -> list[Pose]:
    J = len(names)
    keys = [Pose.rest(J)]
    scale = np.array([_POSE_SCALE.get(n, 0.0) for n in names])
    for _ in range(n_keys - 1):
        rot = rng.normal(scale=sigma, size=(J, 3)) * scale[:, None]
        rot[0] = [0.0, rng.uniform(-0.4, 0.4), 0.0]
        keys.append(Pose(rot, np.zeros(3)))
    return keys


def motion(names: list[str], n_total: int, frames_per_key: int, sigma: float, rng: np.random.Generator) -> list[Pose]:
    """Frame 0 is the rest pose; later frames interpolate between seeded key poses."""
    n_keys = max(2, math.ceil((n_total - 1) / frames_per_key) + 1)
    keys = key_poses(names, n_keys, sigma, rng)
    poses = []
    for i in range(n_total):
        u = i / frames_per_key
        k = min(int(u), n_keys - 2)
        poses.append(interpolate_pose(keys[k], keys[k + 1], min(u - k, 1.0)))
    return poses


# ------------------------------------------------------------------ dataset


def _write_frames(root: Path, gt, prior, cams, poses, bg, workers: int) -> None:
    def one(f):
        save_pose(root / "poses" / f"{frame_name(f)}.yaml", poses[f])
        ctx = FrameContext.build(prior, poses[f])
        for v, cam in enumerate(cams):
            rgb, mask = trace_view(gt, prior, ctx, cam, bg)
            save_png(root / "images" / frame_name(f) / f"{view_name(v)}.png", rgb)
            save_mask(root / "masks" / frame_name(f) / f"{view_name(v)}.png", mask)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(one, range(len(poses))))
    else:
        for f in range(len(poses)):
            one(f)


def synth_dataset(root: str | Path, cfg: dict | None = None, workers: int = 1, prior: BodyPrior | None = None) -> Path:
    cfg = merge_synth_config(cfg)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    body_cfg = merge_body_config(cfg["body"])
    prior = prior if prior is not None else build_body_prior(body_cfg)
    rng = np.random.default_rng(cfg["seed"])
    gt = GroundTruthBody(body_cfg, seed=int(rng.integers(2**31)))
    cams = ring_cameras(cfg["n_views"], cfg["radius"], cfg["width"], cfg["height"], cfg["focal_scale"], cfg["look_at"])
    F, U = cfg["n_frames"], cfg["n_unseen"]
    names = [j["name"] for j in body_cfg["skeleton"]["joints"]]
    poses = motion(names, F + U, cfg["frames_per_key"], cfg["pose_sigma"], rng)

    (root / "body.yaml").write_text(yaml.safe_dump(body_cfg, default_flow_style=None))
    meta = {"n_frames": F, "n_views": cfg["n_views"], "width": cfg["width"], "height": cfg["height"],
            "bg": list(cfg["bg"]), "body": "body.yaml", "seed": cfg["seed"]}
    (root / "dataset.yaml").write_text(yaml.safe_dump(meta, default_flow_style=None))
    save_cameras(root / "cameras.yaml", cams)
    split = {"train": list(range(F)), "unseen": list(range(U)), "unseen_source_frames": list(range(F, F + U))}
    (root / "split.yaml").write_text(yaml.safe_dump(split, default_flow_style=None))

    _write_frames(root, gt, prior, cams, poses[:F], cfg["bg"], workers)
    if U:
        _write_frames(root / "unseen", gt, prior, cams, poses[F:], cfg["bg"], workers)
    (root / "gt").mkdir(exist_ok=True)
    save_obj(gt.mesh(cfg["gt_voxel"]), root / "gt" / "canonical.obj")
    return root
