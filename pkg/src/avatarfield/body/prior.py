"""Procedural articulated body prior.

A capsule humanoid stands in for a licensed parametric body model. It exposes
the same prior quantities a reconstruction pipeline consumes: bone matrices,
per-vertex skinning weights, a canonical SDF volume, posed template vertices
and a dilated mesh for ray-interval sampling.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial import cKDTree

from ..geometry import SdfVolume, TriMesh, bake_sdf, load_obj, marching_cubes, sample_trilinear
from ..geometry.mesh import MeshError
from .skeleton import Pose, Skeleton, forward_kinematics

SKIN_TEMPERATURE = 0.02
SKIN_TOP_K = 4
DILATION = 0.05

_SMPL_NAMES = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
]


def default_body_config() -> dict:
    """24-joint humanoid in a star pose; y up, facing +z, metres."""
    joints = [
        (-1, (0.0, 0.0, 0.0)),
        (0, (0.09, -0.08, 0.0)), (0, (-0.09, -0.08, 0.0)), (0, (0.0, 0.11, 0.0)),
        (1, (0.08, -0.38, 0.0)), (2, (-0.08, -0.38, 0.0)), (3, (0.0, 0.13, 0.0)),
        (4, (0.07, -0.38, 0.0)), (5, (-0.07, -0.38, 0.0)), (6, (0.0, 0.06, 0.0)),
        (7, (0.0, -0.05, 0.12)), (8, (0.0, -0.05, 0.12)), (9, (0.0, 0.22, 0.0)),
        (9, (0.07, 0.15, 0.0)), (9, (-0.07, 0.15, 0.0)), (12, (0.0, 0.09, 0.02)),
        (13, (0.11, 0.03, 0.0)), (14, (-0.11, 0.03, 0.0)),
        (16, (0.24, -0.09, 0.0)), (17, (-0.24, -0.09, 0.0)),
        (18, (0.24, -0.09, 0.0)), (19, (-0.24, -0.09, 0.0)),
        (20, (0.08, -0.03, 0.0)), (21, (-0.08, -0.03, 0.0)),
    ]
    capsules = [
        {"a": 0, "b": 3, "radius": 0.11},
        {"a": 1, "b": 2, "radius": 0.09},
        {"a": 3, "b": 6, "radius": 0.12},
        {"a": 6, "b": 9, "radius": 0.12},
        {"a": 13, "b": 14, "radius": 0.07},
        {"a": 9, "b": 12, "radius": 0.06},
        {"a": 12, "b": 15, "radius": 0.055},
        {"a": 15, "end": [0.0, 0.12, 0.0], "radius": 0.095},
        {"a": 1, "b": 4, "radius": 0.075}, {"a": 2, "b": 5, "radius": 0.075},
        {"a": 4, "b": 7, "radius": 0.055}, {"a": 5, "b": 8, "radius": 0.055},
        {"a": 7, "b": 10, "radius": 0.045}, {"a": 8, "b": 11, "radius": 0.045},
        {"a": 13, "b": 16, "radius": 0.06}, {"a": 14, "b": 17, "radius": 0.06},
        {"a": 16, "b": 18, "radius": 0.05}, {"a": 17, "b": 19, "radius": 0.05},
        {"a": 18, "b": 20, "radius": 0.04}, {"a": 19, "b": 21, "radius": 0.04},
        {"a": 20, "b": 22, "radius": 0.035}, {"a": 21, "b": 23, "radius": 0.035},
        {"a": 22, "end": [0.05, -0.02, 0.0], "radius": 0.03},
        {"a": 23, "end": [-0.05, -0.02, 0.0], "radius": 0.03},
    ]
    return {
        "skeleton": {
            "joints": [
                {"name": n, "parent": p, "offset": list(o)} for n, (p, o) in zip(_SMPL_NAMES, joints)
            ],
            "leaf_length": 0.08,
        },
        "capsules": capsules,
        "blend": 0.02,
        "template": {"voxel": 0.02},
        "sdf": {"resolution": 64, "bbox": [[-1.0, -1.1, -0.35], [1.0, 1.0, 0.4]]},
        "dilation": {"level": DILATION, "resolution": None},
        "skinning": {"temperature": SKIN_TEMPERATURE, "top_k": SKIN_TOP_K},
    }


def single_capsule_config() -> dict:
    return {
        "skeleton": {"joints": [{"name": "root", "parent": -1, "offset": [0.0, 0.0, 0.0]}], "leaf_length": 0.3},
        "capsules": [{"a": 0, "end": [0.0, 0.3, 0.0], "radius": 0.1}],
        "blend": 0.0,
        "template": {"voxel": 0.015},
        "sdf": {"resolution": 32, "bbox": [[-0.3, -0.3, -0.3], [0.3, 0.6, 0.3]]},
        "dilation": {"level": DILATION, "resolution": None},
        "skinning": {"temperature": SKIN_TEMPERATURE, "top_k": SKIN_TOP_K},
    }


_KNOWN_KEYS = {"skeleton", "capsules", "blend", "template", "sdf", "dilation", "skinning", "external"}


def load_body_config(path: str | Path) -> dict:
    cfg = yaml.safe_load(Path(path).read_text())
    return merge_body_config(cfg or {})


def merge_body_config(cfg: dict) -> dict:
    unknown = set(cfg) - _KNOWN_KEYS
    if unknown:
        raise KeyError(f"unknown body config key(s): {sorted(unknown)}")
    out = default_body_config()
    for k, v in cfg.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = copy.deepcopy(v)
    return out


def skeleton_from_config(cfg: dict) -> Skeleton:
    joints = cfg["skeleton"]["joints"]
    return Skeleton(
        parents=[j["parent"] for j in joints],
        offsets=[j["offset"] for j in joints],
        names=[j.get("name", str(i)) for i, j in enumerate(joints)],
    )


# ------------------------------------------------------------------ analytic shape


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-18), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def smooth_min(a: np.ndarray, b: np.ndarray, k: float) -> np.ndarray:
    if k <= 0:
        return np.minimum(a, b)
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def capsule_segments(cfg: dict, joints: np.ndarray) -> list[tuple[np.ndarray, np.ndarray, float]]:
    segs = []
    for c in cfg["capsules"]:
        a = joints[c["a"]]
        b = joints[c["b"]] if "b" in c else a + np.asarray(c["end"], dtype=np.float64)
        segs.append((a, b, float(c["radius"])))
    return segs


def capsule_union_sdf(cfg: dict, points: np.ndarray) -> np.ndarray:
    """Smooth union of the configured capsules in the canonical pose."""
    joints = skeleton_from_config(cfg).rest_joints()
    d = None
    for a, b, r in capsule_segments(cfg, joints):
        di = _segment_distance(points, a, b) - r
        d = di if d is None else smooth_min(d, di, cfg.get("blend", 0.0))
    return d


def bone_segments(skeleton: Skeleton, leaf_length: float) -> list[list[tuple[np.ndarray, np.ndarray]]]:
    """Per joint, the segments of the bone(s) it drives."""
    joints = skeleton.rest_joints()
    segs = []
    for j in range(skeleton.n_joints):
        kids = skeleton.children(j)
        if kids:
            segs.append([(joints[j], joints[c]) for c in kids])
        else:
            p = skeleton.parents[j]
            d = joints[j] - joints[p] if p >= 0 else np.array([0.0, 1.0, 0.0])
            n = np.linalg.norm(d)
            d = d / n if n > 0 else np.array([0.0, 1.0, 0.0])
            segs.append([(joints[j], joints[j] + leaf_length * d)])
    return segs


def bone_softmax_weights(
    skeleton: Skeleton,
    points: np.ndarray,
    leaf_length: float,
    temperature: float = SKIN_TEMPERATURE,
    top_k: int = SKIN_TOP_K,
) -> np.ndarray:
    """Softmax over negative point-to-bone distances, truncated to ``top_k`` bones."""
    points = np.atleast_2d(points)
    dist = np.empty((len(points), skeleton.n_joints))
    for j, segs in enumerate(bone_segments(skeleton, leaf_length)):
        dist[:, j] = np.min([_segment_distance(points, a, b) for a, b in segs], axis=0)
    logits = -dist / temperature
    k = min(top_k, skeleton.n_joints)
    keep = np.argsort(dist, axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(dist, dtype=bool)
    np.put_along_axis(mask, keep, True, axis=1)
    logits = np.where(mask, logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


# ------------------------------------------------------------------ prior


@dataclass
class BodyPrior:
    skeleton: Skeleton
    template: TriMesh
    weights: np.ndarray  # (N, J) prior skinning weights of template vertices
    s_base: SdfVolume
    dilated: TriMesh
    dilated_weights: np.ndarray  # (M, J), used to pose the dilated mesh
    config: dict

    @property
    def n_joints(self) -> int:
        return self.skeleton.n_joints

    def base_sdf(self, points: np.ndarray) -> np.ndarray:
        return sample_trilinear(self.s_base, points)[0]

    def bone_matrices(self, pose: Pose) -> np.ndarray:
        return forward_kinematics(self.skeleton, pose)

    def posed_vertices(self, B: np.ndarray) -> TriMesh:
        return pose_mesh(self.template, self.weights, B)

    def posed_dilated(self, B: np.ndarray) -> TriMesh:
        return pose_mesh(self.dilated, self.dilated_weights, B)


def lbs_forward(points: np.ndarray, weights: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Blend the bone matrices per point, then apply them."""
    M = np.einsum("nj,jab->nab", weights, B)
    return np.einsum("nab,nb->na", M[:, :3, :3], points) + M[:, :3, 3]


def pose_mesh(mesh: TriMesh, weights: np.ndarray, B: np.ndarray) -> TriMesh:
    return mesh.with_vertices(lbs_forward(mesh.vertices, weights, B))


def build_body_prior(cfg: dict | None = None) -> BodyPrior:
    cfg = merge_body_config(cfg or {})
    skeleton = skeleton_from_config(cfg)
    leaf = cfg["skeleton"].get("leaf_length", 0.08)
    skin = cfg["skinning"]
    bbox_min, bbox_max = (np.asarray(b, dtype=np.float64) for b in cfg["sdf"]["bbox"])

    ext = cfg.get("external")
    if ext:
        template = load_obj(ext["template"])
        weights = np.fromfile(ext["weights"], dtype="<f4").astype(np.float64).reshape(template.n_vertices, -1)
        if weights.shape[1] != skeleton.n_joints:
            raise MeshError("external weight table does not match the skeleton joint count")
    else:
        voxel = cfg["template"]["voxel"]
        res = np.maximum(np.ceil((bbox_max - bbox_min) / voxel).astype(int) + 1, 2)
        template = marching_cubes(lambda p: capsule_union_sdf(cfg, p), bbox_min, bbox_max, res, 0.0)
        weights = bone_softmax_weights(skeleton, template.vertices, leaf, skin["temperature"], skin["top_k"])
    if not template.watertight:
        raise MeshError("template mesh is not watertight")

    s_base = bake_sdf(template, bbox_min, bbox_max, cfg["sdf"]["resolution"])
    dil = cfg["dilation"]
    dres = dil.get("resolution")
    if dres is None:
        dilated = marching_cubes(s_base.values, bbox_min, bbox_max, s_base.resolution, dil["level"])
    else:
        dilated = marching_cubes(lambda p: sample_trilinear(s_base, p)[0], bbox_min, bbox_max, dres, dil["level"])
    if not dilated.watertight:
        raise MeshError("dilated mesh is not watertight; enlarge the SDF bbox")
    dilated_weights = bone_softmax_weights(skeleton, dilated.vertices, leaf, skin["temperature"], skin["top_k"])
    return BodyPrior(skeleton, template, weights, s_base, dilated, dilated_weights, cfg)


class KnnIndex:
    """Exact K-nearest-vertex queries against one posed vertex set."""

    def __init__(self, vertices: np.ndarray):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.tree = cKDTree(self.vertices)

    def query(self, x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(indices, distances), each (N, k), ascending by distance, ties to the lower index."""
        n = len(self.vertices)
        if k > n:
            raise ValueError(f"K={k} exceeds the vertex count {n}")
        if k < 1:
            raise ValueError("K must be >= 1")
        x = np.atleast_2d(x)
        kk = min(k + 1, n)
        d, i = self.tree.query(x, k=kk)
        d = d.reshape(len(x), kk)
        i = i.reshape(len(x), kk)
        order = np.lexsort((i, d), axis=1)
        d = np.take_along_axis(d, order, 1)[:, :k]
        i = np.take_along_axis(i, order, 1)[:, :k]
        return i, d


def knn_vertices(V_obs: TriMesh | np.ndarray, x, k: int) -> list[tuple[int, float]]:
    verts = V_obs.vertices if isinstance(V_obs, TriMesh) else V_obs
    idx, dist = KnnIndex(verts).query(np.asarray(x, dtype=np.float64).reshape(1, 3), k)
    return [(int(a), float(b)) for a, b in zip(idx[0], dist[0])]
