"""Image quality metrics on [0, 1] images."""

from __future__ import annotations

import math

import numpy as np
import torch

from .losses import LpipsProxy, ssim as _ssim

PSNR_CAP = 99.0


def _check(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    return float(_ssim(torch.from_numpy(pred), torch.from_numpy(gt)))


def lpips_proxy(pred, gt, seed: int = 0) -> float:
    pred, gt = _check(pred, gt)
    return float(LpipsProxy(pred.shape[-1] if pred.ndim == 3 else 1, seed)(torch.from_numpy(pred), torch.from_numpy(gt)))
