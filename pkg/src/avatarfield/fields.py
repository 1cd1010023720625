"""Canonical-space geometry and appearance: base SDF volume + tri-plane residual."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .geometry import SdfVolume


def positional_encoding(x: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < n_freqs."""
    if n_freqs == 0:
        return x
    freqs = (2.0 ** torch.arange(n_freqs, dtype=x.dtype, device=x.device)) * math.pi
    xf = x[..., None, :] * freqs[:, None]
    return torch.cat([x, torch.sin(xf).flatten(-2), torch.cos(xf).flatten(-2)], dim=-1)


class BaseVolume(nn.Module):
    """Frozen trilinear SDF grid returning value and analytic gradient."""

    def __init__(self, vol: SdfVolume):
        super().__init__()
        self.register_buffer("values", torch.from_numpy(vol.values.copy()))
        self.register_buffer("bbox_min", torch.from_numpy(vol.bbox_min.copy()))
        self.register_buffer("bbox_max", torch.from_numpy(vol.bbox_max.copy()))

    @property
    def resolution(self):
        return tuple(self.values.shape)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return trilinear(self.values, self.bbox_min, self.bbox_max, x)


def trilinear(values: torch.Tensor, bmin: torch.Tensor, bmax: torch.Tensor, x: torch.Tensor):
    """Trilinear value and analytic gradient, both differentiable in ``x``.

    Out-of-box points are clamped to the box and the Euclidean distance to the
    box is added to the value.
    """
    values = values.to(x.dtype)
    bmin = bmin.to(x.dtype)
    bmax = bmax.to(x.dtype)
    res = torch.tensor(values.shape, device=x.device)
    spacing = (bmax - bmin) / (res - 1).to(x.dtype)
    clamped = torch.minimum(torch.maximum(x, bmin), bmax)
    outside = x - clamped
    u = (clamped - bmin) / spacing
    i0 = torch.minimum(torch.clamp(torch.floor(u.detach()), min=0).long(), res - 2)
    f = u - i0.to(x.dtype)
    nx, ny, nz = values.shape
    flat = values.reshape(-1)
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]

    def corner(a, b, c):
        return flat[base + (a * ny + b) * nz + c]

    c000, c001, c010, c011 = corner(0, 0, 0), corner(0, 0, 1), corner(0, 1, 0), corner(0, 1, 1)
    c100, c101, c110, c111 = corner(1, 0, 0), corner(1, 0, 1), corner(1, 1, 0), corner(1, 1, 1)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c00 = c000 + (c100 - c000) * fx
    c01 = c001 + (c101 - c001) * fx
    c10 = c010 + (c110 - c010) * fx
    c11 = c011 + (c111 - c011) * fx
    c0 = c00 + (c10 - c00) * fy
    c1 = c01 + (c11 - c01) * fy
    val = c0 + (c1 - c0) * fz

    dx00, dx01, dx10, dx11 = c100 - c000, c101 - c001, c110 - c010, c111 - c011
    dx0 = dx00 + (dx10 - dx00) * fy
    dx1 = dx01 + (dx11 - dx01) * fy
    gx = dx0 + (dx1 - dx0) * fz
    dy0 = c10 - c00
    dy1 = c11 - c01
    gy = dy0 + (dy1 - dy0) * fz
    gz = c1 - c0
    grad = torch.stack([gx, gy, gz], dim=-1) / spacing

    is_clamped = outside != 0
    if bool(is_clamped.any()):
        dist = torch.sqrt((outside ** 2).sum(-1).clamp_min(1e-30))
        out = is_clamped.any(-1)
        val = val + torch.where(out, dist, torch.zeros_like(dist))
        grad = torch.where(is_clamped, torch.zeros_like(grad), grad)
        grad = grad + torch.where(out[:, None], outside / dist[:, None], torch.zeros_like(grad))
    return val, grad


class TriPlane(nn.Module):
    """Three axis-aligned L x L x C feature planes over the cube [-half, half]^3."""

    PLANES = ((0, 1), (1, 2), (0, 2))  # xy, yz, xz

    def __init__(self, resolution: int = 128, channels: int = 32, half_extent: float = 1.0, init_std: float = 0.1,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.resolution = resolution
        self.channels = channels
        self.half_extent = half_extent
        planes = torch.randn(3, resolution * resolution, channels, generator=generator) * init_std
        self.planes = nn.Parameter(planes)

    @property
    def out_dim(self) -> int:
        return 3 * self.channels

    def plane_coords(self, x: torch.Tensor) -> torch.Tensor:
        """Continuous texel coordinates in [0, L-1] (nodes at the cube faces)."""
        h = self.half_extent
        xc = torch.clamp(x, -h, h)
        return (xc + h) / (2 * h) * (self.resolution - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        L = self.resolution
        g = self.plane_coords(x)
        feats = []
        for p, (a, b) in enumerate(self.PLANES):
            u, v = g[:, a], g[:, b]
            i0 = torch.clamp(torch.floor(u.detach()).long(), 0, L - 2)
            j0 = torch.clamp(torch.floor(v.detach()).long(), 0, L - 2)
            fu = (u - i0.to(u.dtype))[:, None]
            fv = (v - j0.to(v.dtype))[:, None]
            plane = self.planes[p]
            idx = i0 * L + j0
            f00 = plane[idx]
            f01 = plane[idx + 1]
            f10 = plane[idx + L]
            f11 = plane[idx + L + 1]
            feats.append(
                f00 * (1 - fu) * (1 - fv) + f10 * fu * (1 - fv) + f01 * (1 - fu) * fv + f11 * fu * fv
            )
        return torch.cat(feats, dim=-1)


class GeometryNet(nn.Module):
    """Tri-plane features + positional encoding -> (delta SDF, feature vector)."""

    def __init__(self, triplane: TriPlane, hidden: int = 128, feature_dim: int = 64, n_freqs: int = 6,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.triplane = triplane
        self.n_freqs = n_freqs
        in_dim = triplane.out_dim + 3 + 6 * n_freqs
        self.l1 = nn.Linear(in_dim, hidden)
        self.l2 = nn.Linear(hidden, hidden)
        self.delta_head = nn.Linear(hidden, 1)
        self.feature_head = nn.Linear(hidden, feature_dim)
        self.act = nn.Softplus(beta=100)
        _init_linear([self.l1, self.l2, self.feature_head], generator)
        nn.init.zeros_(self.delta_head.weight)
        nn.init.zeros_(self.delta_head.bias)

    @property
    def feature_dim(self) -> int:
        return self.feature_head.out_features

    def falloff(self, x: torch.Tensor) -> torch.Tensor:
        """1 inside the tri-plane cube, smoothly 0 at 1.1x its half extent."""
        h = self.triplane.half_extent
        r = x.abs().max(dim=-1).values
        t = torch.clamp((r / h - 1.0) / 0.1, 0.0, 1.0)
        return 1.0 - t * t * (3 - 2 * t)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = torch.cat([self.triplane(x), positional_encoding(x / self.triplane.half_extent, self.n_freqs)], -1)
        h = self.act(self.l1(h))
        h = self.act(self.l2(h))
        delta = self.delta_head(h)[:, 0] * self.falloff(x)
        return delta, self.feature_head(h)


class ColorNet(nn.Module):
    def __init__(self, feature_dim: int = 64, hidden: int = 128, n_freqs_dir: int = 4, use_normal: bool = True,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.n_freqs_dir = n_freqs_dir
        self.use_normal = use_normal
        in_dim = feature_dim + 3 + 6 * n_freqs_dir + (3 if use_normal else 0)
        self.l1 = nn.Linear(in_dim, hidden)
        self.l2 = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, 3)
        _init_linear([self.l1, self.l2, self.out], generator)

    def forward(self, feature: torch.Tensor, view_dir: torch.Tensor, normal: torch.Tensor | None = None):
        parts = [feature, positional_encoding(view_dir, self.n_freqs_dir)]
        if self.use_normal:
            parts.append(normal)
        h = torch.relu(self.l1(torch.cat(parts, -1)))
        h = torch.relu(self.l2(h))
        return torch.sigmoid(self.out(h))


def _init_linear(layers, generator):
    for layer in layers:
        bound = 1.0 / math.sqrt(layer.in_features)
        with torch.no_grad():
            layer.weight.copy_((torch.rand(layer.weight.shape, generator=generator) * 2 - 1) * bound)
            layer.bias.copy_((torch.rand(layer.bias.shape, generator=generator) * 2 - 1) * bound)


class ImplicitBody(nn.Module):
    """S(x) = S_base(x) + S_delta(x) with a view-dependent color branch."""

    def __init__(self, base: BaseVolume, geometry: GeometryNet, color: ColorNet):
        super().__init__()
        self.base = base
        self.geometry = geometry
        self.color = color

    def sdf(self, x: torch.Tensor, create_graph: bool = False):
        """(S, grad S, feature) at canonical points ``x`` (N, 3)."""
        with torch.enable_grad():
            if not x.requires_grad:
                x = x.detach().requires_grad_(True)
            s_base, g_base = self.base(x)
            delta, feature = self.geometry(x)
            (g_delta,) = torch.autograd.grad(delta.sum(), x, create_graph=create_graph)
        return s_base + delta, g_base + g_delta, feature

    def sdf_value(self, x: torch.Tensor) -> torch.Tensor:
        s_base, _ = self.base(x)
        delta, _ = self.geometry(x)
        return s_base + delta


def sdf_numpy(model: ImplicitBody, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(points), chunk):
            x = torch.from_numpy(np.ascontiguousarray(points[i : i + chunk])).to(dtype)
            out.append(model.sdf_value(x).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)
