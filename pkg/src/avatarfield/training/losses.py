"""Photometric, perceptual-proxy and canonical-space regularisation losses."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

SSIM_WIN = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
MASK_CLAMP = 1e-4
SKIN_UNTIL = 50_000


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_rgb(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the per-ray L1 norm."""
    _same_shape(pred, gt)
    return (pred - gt).abs().sum(-1).mean()


def loss_skinning(w_pred: torch.Tensor, w_init: torch.Tensor) -> torch.Tensor:
    _same_shape(w_pred, w_init)
    return (w_pred - w_init).abs().sum(-1).mean()


def loss_eikonal(grads: torch.Tensor) -> torch.Tensor:
    return ((grads.norm(dim=-1) - 1.0) ** 2).mean()


def loss_mask(opacity: torch.Tensor, target: torch.Tensor, region: torch.Tensor | None = None) -> torch.Tensor:
    """BCE with the opacity clamped away from 0 and 1; optionally restricted to ``region``."""
    _same_shape(opacity, target)
    o = opacity.clamp(MASK_CLAMP, 1.0 - MASK_CLAMP)
    bce = -(target * torch.log(o) + (1.0 - target) * torch.log(1.0 - o))
    if region is None:
        return bce.mean()
    region = region.to(bce.dtype)
    return (bce * region).sum() / region.sum().clamp_min(1.0)


def _to_nchw(img: torch.Tensor) -> torch.Tensor:
    """(H, W), (H, W, C) or (B, H, W, C) -> (B, C, H, W)."""
    if img.dim() == 2:
        img = img[..., None]
    if img.dim() == 3:
        img = img[None]
    return img.permute(0, 3, 1, 2)


def ssim(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over all 8x8 windows (stride 1) and channels."""
    _same_shape(pred, gt)
    x, y = _to_nchw(pred), _to_nchw(gt)
    if x.shape[-1] < SSIM_WIN or x.shape[-2] < SSIM_WIN:
        raise ValueError(f"patch must be at least {SSIM_WIN}x{SSIM_WIN}")
    pool = lambda t: F.avg_pool2d(t, SSIM_WIN, stride=1)  # noqa: E731
    mx, my = pool(x), pool(y)
    vx = pool(x * x) - mx * mx
    vy = pool(y * y) - my * my
    cxy = pool(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return (num / den).mean()


def loss_nssim(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return 1.0 - ssim(pred, gt)


class LpipsProxy:
    """Fixed bank of seeded random 5x5 filters applied at two scales.

    Stands in for a learned perceptual metric: the loss is the mean squared
    difference of filter responses, so it is symmetric and zero only when the
    responses agree.
    """

    N_FILTERS = 12
    SIZE = 5
    MIN_PATCH = 16

    def __init__(self, channels: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((self.N_FILTERS, channels, self.SIZE, self.SIZE))
        w -= w.mean(axis=(2, 3), keepdims=True)  # respond to structure, not flat colour
        w /= np.sqrt((w**2).sum(axis=(1, 2, 3), keepdims=True))
        self.weight = torch.from_numpy(w)

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = _to_nchw(img)
        w = self.weight.to(x.dtype)
        return [F.conv2d(x, w), F.conv2d(F.avg_pool2d(x, 2), w)]

    def __call__(self, pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
        _same_shape(pred, gt)
        x = _to_nchw(pred)
        if x.shape[-1] < self.MIN_PATCH or x.shape[-2] < self.MIN_PATCH:
            raise ValueError(f"patch must be at least {self.MIN_PATCH}x{self.MIN_PATCH}")
        fa, fb = self.features(pred), self.features(gt)
        return sum(((a - b) ** 2).mean() for a, b in zip(fa, fb)) / len(fa)


@dataclass
class LossWeights:
    lambda1: float = 10.0  # rgb
    lambda2: float = 1.0  # lpips proxy
    lambda3: float = 1.0  # nssim
    lambda4: float = 0.1  # eikonal
    lambda5: float = 1.0  # skinning
    lambda6: float = 1.0  # mask
    skin_until: int = SKIN_UNTIL

    @classmethod
    def from_config(cls, cfg: dict) -> "LossWeights":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in cfg.items() if k in names})

    def skinning_weight(self, step: int) -> float:
        return self.lambda5 if step < self.skin_until else 0.0


TERMS = ("rgb", "lpips", "nssim", "eikonal", "skinning", "mask")


@dataclass
class LossReport:
    rgb: float
    lpips: float
    nssim: float
    eikonal: float
    skinning: float
    mask: float
    total: float

    def row(self) -> list[float]:
        return [getattr(self, t) for t in TERMS] + [self.total]


def total_loss(terms: dict[str, torch.Tensor], weights: LossWeights, step: int):
    """Weighted sum; a term whose weight is zero is left out of the graph entirely."""
    lam = {
        "rgb": weights.lambda1,
        "lpips": weights.lambda2,
        "nssim": weights.lambda3,
        "eikonal": weights.lambda4,
        "skinning": weights.skinning_weight(step),
        "mask": weights.lambda6,
    }
    total = None
    for k in TERMS:
        if lam[k] == 0.0 or k not in terms:
            continue
        t = lam[k] * terms[k]
        total = t if total is None else total + t
    values = {k: float(terms[k].detach()) if k in terms else 0.0 for k in TERMS}
    report = LossReport(**values, total=float(total.detach()))
    return total, report
