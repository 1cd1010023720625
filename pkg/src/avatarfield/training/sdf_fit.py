"""Direct SDF supervision: fit S_base + S_delta to a known target field."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from ..fields import BaseVolume, ColorNet, GeometryNet, ImplicitBody, TriPlane
from ..geometry import SdfVolume
from .losses import loss_eikonal
from .optim import exp_decay


def make_implicit_body(vol: SdfVolume, half_extent: float, triplane_res: int = 64, channels: int = 16,
                       hidden: int = 64, n_freqs: int = 4, seed: int = 0, dtype=torch.float32) -> ImplicitBody:
    gen = torch.Generator().manual_seed(seed)
    tri = TriPlane(triplane_res, channels, half_extent, generator=gen)
    geo = GeometryNet(tri, hidden, 8, n_freqs, generator=gen)
    col = ColorNet(8, 16, 0, use_normal=False, generator=gen)
    return ImplicitBody(BaseVolume(vol), geo, col).to(dtype)


def fit_sdf(body: ImplicitBody, target: Callable[[np.ndarray], np.ndarray], iters: int = 1000,
            batch: int = 4096, lr: float = 1e-3, lr_end: float = 1e-4, eikonal_weight: float = 0.1,
            near_surface: Callable[[int, np.random.Generator], np.ndarray] | None = None,
            seed: int = 0) -> list[float]:
    """Minimise mean |S - target| + w * eikonal on points drawn from the tri-plane cube.

    Half of each batch comes from ``near_surface`` when given.
    """
    rng = np.random.default_rng(seed)
    h = body.geometry.triplane.half_extent
    dtype = next(body.parameters()).dtype
    opt = torch.optim.Adam(body.geometry.parameters(), lr=lr)
    history = []
    for step in range(iters):
        for g in opt.param_groups:
            g["lr"] = exp_decay(step, iters, lr, lr_end)
        n_near = batch // 2 if near_surface is not None else 0
        pts = rng.uniform(-h, h, size=(batch - n_near, 3))
        if n_near:
            pts = np.concatenate([pts, near_surface(n_near, rng)])
        x = torch.from_numpy(pts).to(dtype)
        y = torch.from_numpy(target(pts)).to(dtype)
        s, grad, _ = body.sdf(x, create_graph=True)
        loss = (s - y).abs().mean() + eikonal_weight * loss_eikonal(grad)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return history
