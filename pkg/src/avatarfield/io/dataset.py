"""On-disk multi-view dataset.

    root/
      dataset.yaml            n_frames, n_views, width, height, bg
      body.yaml               body prior config
      cameras.yaml            views: [{K: 3x3, w2c: 4x4}, ...]
      split.yaml              train / unseen frame lists
      poses/frame_0000.yaml   rotations: J x 3 angle-axis, translation: 3
      images/frame_0000/view_00.png
      masks/frame_0000/view_00.png
      unseen/{poses,images,masks}/...
      gt/canonical.obj
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from ..body import Pose
from ..body.prior import merge_body_config
from ..render import Camera
from .images import load_mask, load_png


class DatasetError(ValueError):
    pass


def frame_name(i: int) -> str:
    return f"frame_{i:04d}"


def view_name(v: int) -> str:
    return f"view_{v:02d}"


def pose_to_dict(pose: Pose) -> dict:
    return {
        "rotations": [[float(x) for x in r] for r in pose.rotations],
        "translation": [float(x) for x in pose.translation],
    }


def save_pose(path: Path, pose: Pose) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(pose_to_dict(pose), default_flow_style=None))


def load_pose(path: str | Path, n_joints: int | None = None) -> Pose:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"{path}: pose file missing")
    try:
        d = yaml.safe_load(path.read_text())
        rot = np.asarray(d["rotations"], dtype=np.float64)
        trans = np.asarray(d.get("translation", [0.0, 0.0, 0.0]), dtype=np.float64)
        if rot.ndim != 2 or rot.shape[1] != 3 or trans.shape != (3,):
            raise ValueError("rotations must be J x 3 and translation length 3")
        if n_joints is not None and len(rot) != n_joints:
            raise ValueError(f"expected {n_joints} joints, got {len(rot)}")
        if not (np.isfinite(rot).all() and np.isfinite(trans).all()):
            raise ValueError("non-finite values")
        return Pose(rot, trans)
    except (KeyError, TypeError, ValueError, yaml.YAMLError) as e:
        raise DatasetError(f"{path}: malformed pose ({e})") from e


def camera_to_dict(cam: Camera) -> dict:
    return {
        "K": cam.K.tolist(),
        "w2c": cam.w2c.tolist(),
        "width": cam.width,
        "height": cam.height,
    }


def camera_from_dict(d: dict) -> Camera:
    K = np.asarray(d["K"], dtype=np.float64)
    return Camera(K[0, 0], K[1, 1], K[0, 2], K[1, 2], int(d["width"]), int(d["height"]), np.asarray(d["w2c"]))


def save_cameras(path: Path, cams: list[Camera]) -> None:
    path.write_text(yaml.safe_dump({"views": [camera_to_dict(c) for c in cams]}, default_flow_style=None))


def load_cameras(path: str | Path) -> list[Camera]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"{path}: cameras file missing")
    try:
        views = yaml.safe_load(path.read_text())["views"]
        return [camera_from_dict(v) for v in views]
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise DatasetError(f"{path}: malformed cameras ({e})") from e


@dataclass
class Dataset:
    root: Path
    cameras: list[Camera]
    poses: list[Pose]
    body_config: dict
    bg: tuple
    split: dict
    subset: str = ""  # "" for training frames, "unseen" for held-out poses

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def _base(self) -> Path:
        return self.root / self.subset if self.subset else self.root

    def image_path(self, f: int, v: int) -> Path:
        return self._base() / "images" / frame_name(f) / f"{view_name(v)}.png"

    def mask_path(self, f: int, v: int) -> Path:
        return self._base() / "masks" / frame_name(f) / f"{view_name(v)}.png"

    def pose_path(self, f: int) -> Path:
        return self._base() / "poses" / f"{frame_name(f)}.yaml"

    def image(self, f: int, v: int) -> np.ndarray:
        return load_png(self.image_path(f, v))

    def mask(self, f: int, v: int) -> np.ndarray:
        return load_mask(self.mask_path(f, v))

    def unseen(self) -> "Dataset":
        n = len(self.split.get("unseen", []))
        J = len(self.body_config["skeleton"]["joints"])
        base = self.root / "unseen"
        poses = [load_pose(base / "poses" / f"{frame_name(i)}.yaml", J) for i in range(n)]
        ds = Dataset(self.root, self.cameras, poses, self.body_config, self.bg, self.split, "unseen")
        ds.validate()
        return ds

    def validate(self) -> None:
        """Raise DatasetError naming the first missing or malformed file."""
        for f in range(self.n_frames):
            for v in range(self.n_views):
                for p in (self.image_path(f, v), self.mask_path(f, v)):
                    if not p.is_file():
                        raise DatasetError(f"{p}: missing")
        cam = self.cameras[0] if self.cameras else None
        if cam is not None and self.n_frames:
            img = self.image(0, 0)
            if img.shape[:2] != (cam.height, cam.width):
                raise DatasetError(f"{self.image_path(0, 0)}: size {img.shape[:2]} does not match the camera")


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    meta_path = root / "dataset.yaml"
    if not meta_path.is_file():
        raise DatasetError(f"{meta_path}: missing")
    meta = yaml.safe_load(meta_path.read_text()) or {}
    for k in ("n_frames", "n_views"):
        if k not in meta:
            raise DatasetError(f"{meta_path}: missing key '{k}'")
    body_path = root / meta.get("body", "body.yaml")
    if not body_path.is_file():
        raise DatasetError(f"{body_path}: missing")
    body_cfg = merge_body_config(yaml.safe_load(body_path.read_text()) or {})
    cams = load_cameras(root / "cameras.yaml")
    if len(cams) != meta["n_views"]:
        raise DatasetError(f"{root / 'cameras.yaml'}: {len(cams)} views, dataset.yaml says {meta['n_views']}")
    J = len(body_cfg["skeleton"]["joints"])
    poses = [load_pose(root / "poses" / f"{frame_name(i)}.yaml", J) for i in range(meta["n_frames"])]
    split_path = root / "split.yaml"
    split = yaml.safe_load(split_path.read_text()) if split_path.is_file() else {"train": list(range(len(poses)))}
    ds = Dataset(root, cams, poses, body_cfg, tuple(meta.get("bg", (1.0, 1.0, 1.0))), split)
    ds.validate()
    return ds
