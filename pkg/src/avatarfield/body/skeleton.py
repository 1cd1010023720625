"""Kinematic tree, poses and forward kinematics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Skeleton:
    parents: np.ndarray  # (J,), -1 for the root
    offsets: np.ndarray  # (J, 3) rest offset from the parent joint (root: absolute position)
    names: list[str] | None = None

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        if len(self.parents) != len(self.offsets):
            raise ValueError("parents and offsets disagree on the joint count")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j in range(1, len(self.parents)):
            if not 0 <= self.parents[j] < j:
                raise ValueError(f"joint {j}: parent index must precede the child")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def children(self, j: int) -> list[int]:
        return [int(c) for c in np.nonzero(self.parents == j)[0]]

    def rest_joints(self) -> np.ndarray:
        """Joint positions in the canonical (star) pose."""
        pos = np.zeros_like(self.offsets)
        for j, p in enumerate(self.parents):
            pos[j] = self.offsets[j] if p < 0 else pos[p] + self.offsets[j]
        return pos


@dataclass
class Pose:
    rotations: np.ndarray  # (J, 3) angle-axis, radians
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.any(np.linalg.norm(self.rotations, axis=1) > np.pi + 1e-6):
            raise ValueError("angle-axis rotation norm must not exceed pi")

    @classmethod
    def rest(cls, n_joints: int) -> "Pose":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))


def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Angle-axis (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(theta < 1e-12, 1.0, theta)
    k = aa / safe
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], axis=-1).reshape(aa.shape[:-1] + (3, 3))
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + s * K + (1 - c) * (K @ K)
    return np.where((theta < 1e-12)[..., None], eye, R)


def _rigid(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def world_transforms(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """(J, 4, 4) joint frames in world space under ``pose``."""
    R = rodrigues(pose.rotations)
    G = np.empty((skeleton.n_joints, 4, 4))
    for j, p in enumerate(skeleton.parents):
        if p < 0:
            G[j] = _rigid(R[j], skeleton.offsets[j] + pose.translation)
        else:
            G[j] = G[p] @ _rigid(R[j], skeleton.offsets[j])
    return G


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Bone matrices taking canonical-pose points to the observation pose."""
    G = world_transforms(skeleton, pose)
    G_rest = world_transforms(skeleton, Pose.rest(skeleton.n_joints))
    return G @ np.linalg.inv(G_rest)


def interpolate_pose(a: Pose, b: Pose, t: float) -> Pose:
    """Per-joint slerp of angle-axis rotations and lerp of the root translation."""
    Ra, Rb = rodrigues(a.rotations), rodrigues(b.rotations)
    rel = np.swapaxes(Ra, -1, -2) @ Rb
    rot = Ra @ rodrigues(t * matrix_to_axis_angle(rel))
    return Pose(matrix_to_axis_angle(rot), (1 - t) * a.translation + t * b.translation)


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos)
    w = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1)
    sin = np.sin(theta)
    small = sin < 1e-8
    axis = w / np.where(small, 1.0, 2 * sin)[..., None]
    out = axis * theta[..., None]
    # near-identity: first-order; near-pi: recover the axis from the symmetric part
    out = np.where(small[..., None] & (theta[..., None] < 1.0), 0.5 * w, out)
    flip = small & (theta > 1.0)
    if np.any(flip):
        B = (R[flip] + np.eye(3)) / 2
        ax = np.sqrt(np.clip(np.diagonal(B, axis1=-2, axis2=-1), 0, None))
        i = np.argmax(ax, axis=-1)
        col = B[np.arange(len(i)), :, i]
        ax = col / np.linalg.norm(col, axis=-1, keepdims=True)
        out[flip] = ax * np.pi
    return out
