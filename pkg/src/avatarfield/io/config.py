"""Training/render configuration with strict key checking."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from ..model import DEFAULT_MODEL
from ..training.optim import DEFAULT_OPTIM

DEFAULT_CONFIG = {
    "dataset": "",
    "out_dir": "runs/default",
    "train": {
        "iters": 20000,
        "seed": 0,
        "save_every": 1000,
        "log_every": 1,
        "patches": 4,
        "patch_size": 32,
        "mask_bias": 0.8,
        "eikonal_points": 1024,
        "skin_warmup": 500,
        "chunk_patches": 1,
        "frames": None,
        "views": None,
    },
    "loss": {
        "lambda1": 10.0,
        "lambda2": 1.0,
        "lambda3": 1.0,
        "lambda4": 0.1,
        "lambda5": 1.0,
        "lambda6": 1.0,
        "skin_until": 50000,
        "lpips": True,
        "mask_target": "dataset",
    },
    "optim": dict(DEFAULT_OPTIM),
    "sampling": {"n_samples": 154, "near": 0.1, "far": 10.0, "jitter": True},
    "deform": {"knn_k": 10, "iters": 3},
    "render": {"bg": [1.0, 1.0, 1.0], "tau": 0.05, "gate_density": True, "chunk": 1024},
    "model": dict(DEFAULT_MODEL),
    "numeric": {"precision": "single"},
}


class ConfigError(KeyError):
    def __str__(self):
        return str(self.args[0])


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge; any key absent from ``base`` is rejected by its dotted path."""
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key: {key}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = merge_config(base[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    cfg = DEFAULT_CONFIG
    if path is not None:
        p = Path(path)
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        cfg = merge_config(cfg, data)
        if cfg["dataset"] and not Path(cfg["dataset"]).is_absolute():
            cfg["dataset"] = str((p.parent / cfg["dataset"]).resolve())
    return merge_config(cfg, overrides or {})
