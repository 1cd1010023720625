from .autodiff import NonFiniteGradient, backward
from .losses import (
    LossReport,
    LossWeights,
    LpipsProxy,
    loss_eikonal,
    loss_mask,
    loss_nssim,
    loss_rgb,
    loss_skinning,
    ssim,
    total_loss,
)
from .metrics import lpips_proxy, psnr
from .optim import build_optimizer, exp_decay, set_learning_rate
