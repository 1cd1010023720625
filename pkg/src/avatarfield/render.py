"""SDF volume rendering of the posed avatar."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .body import BodyPrior, KnnIndex, Pose
from .deform import initial_weights, iterative_backward_deform
from .geometry import BvhIndex, build_bvh
from .model import AvatarModel
from .sampling import sample_rays

MASK_TAU = 0.05
OPACITY_EPS = 1e-3


# ------------------------------------------------------------------ cameras


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    w2c: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.w2c = np.asarray(self.w2c, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.w2c[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("extrinsics must be a rigid transform")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        R, t = self.w2c[:3, :3], self.w2c[:3, 3]
        return -R.T @ t

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height) -> "Camera":
        """OpenCV convention: x right, y down, z forward."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        return cls(fx, fy, width / 2.0, height / 2.0, width, height, w2c)


def generate_rays(cam: Camera, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Rays through pixel centres; ``pixels`` is (M, 2) of (column, row)."""
    px = np.atleast_2d(np.asarray(pixels))
    u, v = px[:, 0], px[:, 1]
    if np.any(u < 0) or np.any(v < 0) or np.any(u >= cam.width) or np.any(v >= cam.height):
        raise ValueError("pixel outside the image")
    d_cam = np.stack([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, np.ones(len(u))], axis=1)
    R = cam.w2c[:3, :3]
    d = d_cam @ R  # R^T d for each row
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape).copy()
    return o, d


def image_pixels(width: int, height: int) -> np.ndarray:
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1)


# ------------------------------------------------------------------ volume rendering


def density_from_sdf(sdf: torch.Tensor, grad: torch.Tensor, view: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """sigma = max(0, s * (sigmoid(s * S) - 1) * (grad S . v))."""
    cos = (grad * view).sum(-1)
    return torch.relu(s * (torch.sigmoid(s * sdf) - 1.0) * cos)


def composite(depths, sigma, colors, grads=None, bg=None, single_delta: float = 1.0):
    """Alpha-composite per-ray samples. Shapes: depths/sigma (R, N), colors (R, N, 3)."""
    if bool((depths[:, 1:] - depths[:, :-1] < 0).any()):
        raise ValueError("sample depths must be ascending")
    if depths.shape[1] > 1:
        d = depths[:, 1:] - depths[:, :-1]
        delta = torch.cat([d, d.mean(dim=1, keepdim=True)], dim=1)
    else:
        delta = torch.full_like(depths, single_delta)
    tau = sigma * delta
    alpha = 1.0 - torch.exp(-tau)
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], dim=1), dim=1))
    weights = alpha * trans
    opacity = weights.sum(dim=1)
    rgb = (weights[..., None] * colors).sum(dim=1)
    if bg is not None:
        rgb = rgb + (1.0 - opacity)[:, None] * bg
    depth = (weights * depths).sum(dim=1) / opacity.clamp_min(1e-6)
    out = {"rgb": rgb, "opacity": opacity, "depth": depth, "weights": weights}
    if grads is not None:
        n = (weights[..., None] * grads).sum(dim=1)
        out["normal"] = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return out


def prior_mask_points(s_base: torch.Tensor, tau: float = MASK_TAU) -> torch.Tensor:
    """1 where S_base(x) - tau <= 0 (boundary inclusive)."""
    return (s_base - tau <= 0).to(s_base.dtype)


def render_prior_mask(s_base: torch.Tensor, tau: float = MASK_TAU) -> torch.Tensor:
    """Per-ray mask: max of the per-sample indicator; ``s_base`` is (R, N)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return prior_mask_points(s_base, tau).amax(dim=-1)


# ------------------------------------------------------------------ per-pose context


@dataclass
class FrameContext:
    """Everything that depends only on the pose: bone matrices, posed prior, BVH, KNN."""

    B: np.ndarray
    B_inv: np.ndarray
    knn: KnnIndex
    bvh: BvhIndex
    scene_box: tuple[np.ndarray, np.ndarray]

    @classmethod
    def build(cls, prior: BodyPrior, pose: Pose, margin: float = 0.1) -> "FrameContext":
        B = prior.bone_matrices(pose)
        posed = prior.posed_vertices(B)
        dil = prior.posed_dilated(B)
        lo, hi = dil.bounds()
        return cls(B, np.linalg.inv(B), KnnIndex(posed.vertices), build_bvh(dil), (lo - margin, hi + margin))


@dataclass
class RenderSettings:
    n_samples: int = 64
    near: float = 0.1
    far: float = 10.0
    bg: tuple = (1.0, 1.0, 1.0)
    knn_k: int = 10
    deform_iters: int = 3
    tau: float = MASK_TAU
    gate_density: bool = True
    chunk: int = 1024

    @classmethod
    def from_config(cls, cfg: dict) -> "RenderSettings":
        s, r, d = cfg.get("sampling", {}), cfg.get("render", {}), cfg.get("deform", {})
        return cls(
            n_samples=s.get("n_samples", cls.n_samples),
            near=s.get("near", cls.near),
            far=s.get("far", cls.far),
            bg=tuple(r.get("bg", cls.bg)),
            knn_k=d.get("knn_k", cls.knn_k),
            deform_iters=d.get("iters", cls.deform_iters),
            tau=r.get("tau", cls.tau),
            gate_density=r.get("gate_density", cls.gate_density),
            chunk=r.get("chunk", cls.chunk),
        )


def render_rays(model: AvatarModel, prior: BodyPrior, ctx: FrameContext, origins: np.ndarray, dirs: np.ndarray,
                settings: RenderSettings, rng: np.random.Generator | None = None, train: bool = False) -> dict:
    """Full pipeline for a batch of rays: sample, deform, query fields, composite.

    With ``train`` the graph is kept for second-order terms (eikonal, density
    through grad S) and auxiliary tensors for the losses are returned.
    """
    dtype = model.dtype
    rs = sample_rays(ctx.bvh, origins, dirs, settings.n_samples, settings.near, settings.far, ctx.scene_box, rng)
    R, N = rs.depths.shape
    x_obs_np = origins[:, None, :] + dirs[:, None, :] * rs.depths[..., None]
    x_obs_np = x_obs_np.reshape(-1, 3)
    w_init_np = initial_weights(x_obs_np, ctx.knn, prior.weights, settings.knn_k)

    x_obs = torch.from_numpy(x_obs_np).to(dtype)
    w_init = torch.from_numpy(w_init_np).to(dtype)
    B_inv = torch.from_numpy(ctx.B_inv).to(dtype)
    view = torch.from_numpy(np.repeat(dirs, N, axis=0)).to(dtype)
    depths = torch.from_numpy(rs.depths).to(dtype)
    bg = torch.tensor(settings.bg, dtype=dtype)

    with torch.set_grad_enabled(train or torch.is_grad_enabled()):
        deform = iterative_backward_deform(x_obs, w_init, B_inv, model.skin, settings.deform_iters)
        x_cnl = deform.x_cnl
        s_base, _ = model.body.base(x_cnl.detach())
        sdf, grad, feature = model.body.sdf(x_cnl, create_graph=train)
        view_cnl = torch.einsum("nab,nb->na", deform.blend[:, :3, :3], view)
        view_cnl = view_cnl / view_cnl.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        normal = grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        color = model.body.color(feature, view_cnl, normal)
        sigma = density_from_sdf(sdf, grad, view_cnl, model.scale())
        point_mask = prior_mask_points(s_base, settings.tau)
        if settings.gate_density:
            sigma = sigma * point_mask
        out = composite(depths, sigma.reshape(R, N), color.reshape(R, N, 3), grad.reshape(R, N, 3), bg)
    out["prior_mask"] = point_mask.reshape(R, N).amax(dim=1)
    out["fallback"] = torch.from_numpy(rs.fallback)
    if train:
        out.update(
            x_cnl=x_cnl, sdf=sdf, grad=grad, w_pred=deform.w_final, w_init=w_init,
            point_mask=point_mask, parity_violations=rs.parity_violations,
        )
    return out


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    opacity: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), 0 where opacity < 1e-3
    normal: np.ndarray  # (H, W, 3) canonical-space normals
    prior_mask: np.ndarray  # (H, W) uint8 {0, 1}


def render_image(model: AvatarModel, prior: BodyPrior, pose_or_ctx, cam: Camera,
                 settings: RenderSettings | None = None, pixels: np.ndarray | None = None) -> RenderOutput:
    settings = settings or RenderSettings()
    ctx = pose_or_ctx if isinstance(pose_or_ctx, FrameContext) else FrameContext.build(prior, pose_or_ctx)
    px = image_pixels(cam.width, cam.height) if pixels is None else pixels
    o, d = generate_rays(cam, px)
    keys = ("rgb", "opacity", "depth", "normal", "prior_mask")
    parts = {k: [] for k in keys}
    was_training = model.training
    model.eval()
    for i in range(0, len(o), settings.chunk):
        with torch.no_grad():
            out = render_rays(model, prior, ctx, o[i : i + settings.chunk], d[i : i + settings.chunk], settings)
        for k in keys:
            parts[k].append(out[k].detach().double().numpy())
    model.train(was_training)
    H, W = cam.height, cam.width
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    opacity = cat["opacity"]
    depth = np.where(opacity < OPACITY_EPS, 0.0, cat["depth"])
    return RenderOutput(
        rgb=np.clip(cat["rgb"], 0.0, 1.0).reshape(H, W, 3),
        opacity=np.clip(opacity, 0.0, 1.0).reshape(H, W),
        depth=depth.reshape(H, W),
        normal=cat["normal"].reshape(H, W, 3),
        prior_mask=cat["prior_mask"].astype(np.uint8).reshape(H, W),
    )
