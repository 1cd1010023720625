"""Reverse-mode gradients via torch autograd, with a NaN guard."""

from __future__ import annotations

import torch
from torch import nn


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in {name}")
        self.name = name


def check_finite(named_params) -> None:
    for name, p in named_params:
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteGradient(name)


def backward(loss: torch.Tensor, module: nn.Module) -> None:
    """Accumulate d loss / d params into ``.grad`` and reject NaN/Inf."""
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    if not bool(torch.isfinite(loss)):
        raise NonFiniteGradient("loss")
    loss.backward()
    check_finite(module.named_parameters())


def grad_of(f, x: torch.Tensor) -> torch.Tensor:
    """Gradient of scalar ``f(x)`` with respect to ``x``."""
    x = x.detach().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g
