"""Learnable avatar: implicit body fields, skinning network and density scale."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .body import BodyPrior
from .deform import SkinningNet
from .fields import BaseVolume, ColorNet, GeometryNet, ImplicitBody, TriPlane

SCALE_MULT = 10.0


class ScaleParam(nn.Module):
    """s = exp(10 * v); the multiplier speeds up learning of the sharpness."""

    def __init__(self, init: float = 20.0):
        super().__init__()
        self.v = nn.Parameter(torch.tensor(math.log(init) / SCALE_MULT))

    def forward(self) -> torch.Tensor:
        return torch.exp(SCALE_MULT * self.v)


DEFAULT_MODEL = {
    "triplane_res": 128,
    "triplane_channels": 32,
    "feature_dim": 64,
    "hidden": 128,
    "skin_hidden": 128,
    "pe_freqs": 6,
    "dir_freqs": 4,
    "use_normal": True,
    "init_s": 20.0,
    "cube_scale": 1.1,
}


def triplane_half_extent(prior: BodyPrior, cube_scale: float) -> float:
    lo, hi = prior.template.bounds()
    return float(cube_scale * np.max(np.maximum(np.abs(lo), np.abs(hi))))


class AvatarModel(nn.Module):
    def __init__(self, prior: BodyPrior, cfg: dict | None = None, seed: int = 0, dtype=torch.float32):
        super().__init__()
        cfg = {**DEFAULT_MODEL, **(cfg or {})}
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        half = triplane_half_extent(prior, cfg["cube_scale"])
        triplane = TriPlane(cfg["triplane_res"], cfg["triplane_channels"], half, generator=gen)
        geometry = GeometryNet(triplane, cfg["hidden"], cfg["feature_dim"], cfg["pe_freqs"], generator=gen)
        color = ColorNet(cfg["feature_dim"], cfg["hidden"], cfg["dir_freqs"], cfg["use_normal"], generator=gen)
        self.body = ImplicitBody(BaseVolume(prior.s_base), geometry, color)
        self.skin = SkinningNet(prior.n_joints, cfg["skin_hidden"], cfg["pe_freqs"], scale=half, generator=gen)
        self.scale = ScaleParam(cfg["init_s"])
        self.to(dtype)

    @property
    def dtype(self):
        return self.scale.v.dtype

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "geometry": list(self.body.geometry.parameters()) + [self.scale.v],
            "color": list(self.body.color.parameters()),
            "skinning": list(self.skin.parameters()),
        }
