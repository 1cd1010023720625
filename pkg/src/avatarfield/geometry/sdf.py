"""Voxel signed distance volumes: baking from meshes and trilinear lookup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bvh import build_bvh, closest_distance, inside_mesh
from .mesh import MeshError, TriMesh


@dataclass
class SdfVolume:
    """Signed distances stored at the nodes of a regular grid spanning ``bbox``.

    Node ``(i, j, k)`` sits at ``bbox_min + (i, j, k) * spacing``; values are
    indexed ``values[i, j, k]`` (x-major, row-major in memory).
    """

    values: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("SdfVolume needs at least 2 nodes per axis")
        if np.any(self.bbox_min >= self.bbox_max):
            raise ValueError("bbox min must be < max componentwise")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("SdfVolume values must be finite")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.array(self.resolution) - 1)

    def grid_points(self) -> np.ndarray:
        axes = [np.linspace(self.bbox_min[a], self.bbox_max[a], self.resolution[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def from_function(cls, fn, bbox_min, bbox_max, resolution) -> "SdfVolume":
        res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
        axes = [np.linspace(bbox_min[a], bbox_max[a], res[a]) for a in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return cls(np.asarray(fn(pts.reshape(-1, 3))).reshape(tuple(res)), bbox_min, bbox_max)


def bake_sdf(mesh: TriMesh, bbox_min, bbox_max, resolution) -> SdfVolume:
    """Exact point-to-triangle distance, signed negative inside by 3-axis parity vote."""
    if not mesh.watertight:
        raise MeshError("bake_sdf requires a watertight mesh")
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    axes = [np.linspace(bbox_min[a], bbox_max[a], res[a]) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    bvh = build_bvh(mesh)
    dist = closest_distance(bvh, pts)
    inside = inside_mesh(bvh, pts)
    dist[inside] *= -1.0
    return SdfVolume(dist.reshape(tuple(res)), bbox_min, bbox_max)


def _cell_coords(vol: SdfVolume, x: np.ndarray):
    res = np.array(vol.resolution)
    clamped = np.clip(x, vol.bbox_min, vol.bbox_max)
    outside = x - clamped
    u = (clamped - vol.bbox_min) / vol.spacing
    i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    f = u - i0
    return clamped, outside, i0, f


def sample_trilinear(vol: SdfVolume, x) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear value and its analytic gradient at points ``x`` (N, 3).

    Points outside the box are clamped onto it and the Euclidean distance to
    the box is added, so the volume stays a valid lower bound far away.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, outside, i0, f = _cell_coords(vol, x)
    v = vol.values
    i, j, k = i0[:, 0], i0[:, 1], i0[:, 2]
    c = np.empty((len(x), 2, 2, 2))
    for a in (0, 1):
        for b in (0, 1):
            for cc in (0, 1):
                c[:, a, b, cc] = v[i + a, j + b, k + cc]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    # collapse along x, then y, then z
    cx = c[:, 0] * (1 - fx)[:, None, None] + c[:, 1] * fx[:, None, None]
    cxy = cx[:, 0] * (1 - fy)[:, None] + cx[:, 1] * fy[:, None]
    val = cxy[:, 0] * (1 - fz) + cxy[:, 1] * fz

    dcx = c[:, 1] - c[:, 0]
    dcx_y = dcx[:, 0] * (1 - fy)[:, None] + dcx[:, 1] * fy[:, None]
    gx = dcx_y[:, 0] * (1 - fz) + dcx_y[:, 1] * fz
    dcy = cx[:, 1] - cx[:, 0]
    gy = dcy[:, 0] * (1 - fz) + dcy[:, 1] * fz
    gz = cxy[:, 1] - cxy[:, 0]
    grad = np.stack([gx, gy, gz], axis=1) / vol.spacing

    out_d = np.linalg.norm(outside, axis=1)
    is_out = out_d > 0
    if np.any(is_out):
        val = val + out_d
        clamped_axes = outside != 0
        grad = np.where(clamped_axes, 0.0, grad)
        grad[is_out] += outside[is_out] / out_d[is_out, None]
    return val, grad
