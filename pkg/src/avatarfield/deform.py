"""Observation-to-canonical correspondence by iterative backward skinning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .body import KnnIndex
from .fields import _init_linear, positional_encoding

DEGENERATE_DET = 1e-12
ZERO_DIST = 1e-9


class DegenerateBlend(ValueError):
    pass


def initial_weights(x_obs: np.ndarray, knn: KnnIndex, prior_weights: np.ndarray, k: int) -> np.ndarray:
    """Inverse-distance blend of the K nearest posed vertices' prior weights.

    With beta_k = d_k / sum(d), sum_k W(k) / beta_k is renormalised onto the
    simplex. A neighbour closer than 1e-9 returns that vertex's weights.
    """
    idx, dist = knn.query(np.atleast_2d(x_obs), k)
    exact = dist[:, 0] < ZERO_DIST
    beta = np.maximum(dist, ZERO_DIST) / np.maximum(dist.sum(axis=1, keepdims=True), ZERO_DIST)
    raw = np.einsum("nk,nkj->nj", 1.0 / beta, prior_weights[idx])
    w = raw / raw.sum(axis=1, keepdims=True)
    if np.any(exact):
        w[exact] = prior_weights[idx[exact, 0]]
    return w


def blend_inverse(w: torch.Tensor, B_inv: torch.Tensor) -> torch.Tensor:
    """(N, 4, 4) blended inverse bone matrices sum_i w_i B_i^-1."""
    return torch.einsum("nj,jab->nab", w, B_inv)


def lbs_backward(x: torch.Tensor, w: torch.Tensor, B_inv: torch.Tensor, check: bool = True):
    """Apply the blended inverse bone matrix; returns (x', blended matrices)."""
    M = blend_inverse(w, B_inv)
    if check:
        det = torch.linalg.det(M[:, :3, :3].detach())
        if bool((det.abs() < DEGENERATE_DET).any()):
            raise DegenerateBlend("degenerate blend: blended bone matrix is singular")
    x_new = torch.einsum("nab,nb->na", M[:, :3, :3], x) + M[:, :3, 3]
    return x_new, M


class SkinningNet(nn.Module):
    """4-layer MLP from encoded canonical points to softmax skinning weights."""

    def __init__(self, n_joints: int, hidden: int = 128, n_freqs: int = 6, scale: float = 1.0,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.n_freqs = n_freqs
        self.scale = scale
        in_dim = 3 + 6 * n_freqs
        self.layers = nn.ModuleList(
            [nn.Linear(in_dim, hidden), nn.Linear(hidden, hidden), nn.Linear(hidden, hidden), nn.Linear(hidden, n_joints)]
        )
        _init_linear(self.layers, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = positional_encoding(x / self.scale, self.n_freqs)
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        return torch.softmax(self.layers[-1](h), dim=-1)


@dataclass
class DeformResult:
    x_cnl: torch.Tensor
    w_final: torch.Tensor
    blend: torch.Tensor  # blended inverse matrix used for x_cnl
    trajectory: list[torch.Tensor] = field(default_factory=list)


def iterative_backward_deform(x_obs: torch.Tensor, w_init: torch.Tensor, B_inv: torch.Tensor, weight_fn,
                              iters: int = 3, check: bool = True) -> DeformResult:
    """x_trans <- LBS(x_obs, w); w <- F(x_trans), ``iters`` times, then one final LBS."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    w = w_init
    trajectory = []
    for _ in range(iters):
        x_trans, _ = lbs_backward(x_obs, w, B_inv, check)
        trajectory.append(x_trans)
        w = weight_fn(x_trans)
    x_cnl, M = lbs_backward(x_obs, w, B_inv, check)
    return DeformResult(x_cnl, w, M, trajectory)
