"""Adam with a per-group exponential learning-rate decay."""

from __future__ import annotations

import torch

DEFAULT_OPTIM = {
    "lr": 5e-4,
    "lr_end": 5e-5,
    "skin_lr": 1e-4,
    "skin_lr_end": 1e-5,
    "betas": [0.9, 0.999],
    "eps": 1e-8,
}


def exp_decay(step: int, total: int, lr0: float, lr_end: float) -> float:
    """lr0 * (lr_end / lr0) ** (step / total), held at lr_end past ``total``."""
    frac = min(max(step / max(total, 1), 0.0), 1.0)
    return lr0 * (lr_end / lr0) ** frac


def build_optimizer(groups: dict[str, list], cfg: dict | None = None) -> torch.optim.Adam:
    cfg = {**DEFAULT_OPTIM, **(cfg or {})}
    param_groups = []
    for name, params in groups.items():
        if not params:
            continue
        lr0, lr_end = (cfg["skin_lr"], cfg["skin_lr_end"]) if name == "skinning" else (cfg["lr"], cfg["lr_end"])
        param_groups.append({"params": params, "lr": lr0, "lr0": lr0, "lr_end": lr_end, "name": name})
    return torch.optim.Adam(param_groups, betas=tuple(cfg["betas"]), eps=cfg["eps"])


def set_learning_rate(opt: torch.optim.Optimizer, step: int, total: int) -> None:
    for g in opt.param_groups:
        g["lr"] = exp_decay(step, total, g["lr0"], g["lr_end"])
