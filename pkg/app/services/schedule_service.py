"""
Лестницы уровней шума и прямой диффузионный процесс.

Соглашение variance-preserving: α = √(1-σ²), так что α² + σ² = 1.
"""
import math
from typing import Union

import torch

from app.exceptions import InvalidArgumentError
from app.models.denoiser import DTYPE
from app.models.schemas import NoiseSchedule

SigmaLike = Union[float, torch.Tensor]


def make_schedule(steps: int, kind: str = "linear") -> NoiseSchedule:
    """Построить лестницу σ_0=0 < σ_1 < ... < σ_K=1"""
    if steps < 1:
        raise InvalidArgumentError(f"schedule needs K >= 1, got {steps}")
    if kind == "linear":
        inner = [k / steps for k in range(1, steps)]
    elif kind == "cosine":
        inner = [math.sin(0.5 * math.pi * k / steps) for k in range(1, steps)]
    else:
        raise InvalidArgumentError(f"unknown schedule kind: {kind}")
    return NoiseSchedule(sigmas=tuple([0.0] + inner + [1.0]), kind=kind)


def alpha(sigma: SigmaLike) -> SigmaLike:
    """α = √(1-σ²)"""
    if isinstance(sigma, torch.Tensor):
        return torch.sqrt(torch.clamp(1.0 - sigma * sigma, min=0.0))
    return math.sqrt(max(1.0 - sigma * sigma, 0.0))


def sigma_column(sigma: SigmaLike, batch: int) -> torch.Tensor:
    """σ как столбец [B, 1] для поэлементных формул"""
    if not isinstance(sigma, torch.Tensor):
        sigma = torch.tensor(float(sigma), dtype=DTYPE)
    sigma = sigma.to(DTYPE)
    if sigma.dim() == 0:
        return sigma.reshape(1, 1).expand(batch, 1)
    return sigma.reshape(-1, 1)


def check_sigma(sigma: SigmaLike, low: float = 0.0, high: float = 1.0, strict_low: bool = False) -> None:
    values = sigma if isinstance(sigma, torch.Tensor) else torch.tensor(float(sigma))
    below = values <= low if strict_low else values < low
    if bool(below.any()) or bool((values > high).any()) or not bool(torch.isfinite(values).all()):
        bracket = "(" if strict_low else "["
        raise InvalidArgumentError(f"noise level outside {bracket}{low}, {high}]")


def forward_diffuse(x: torch.Tensor, sigma: SigmaLike, eps: torch.Tensor) -> torch.Tensor:
    """x_t = √(1-σ²)·x + σ·ε"""
    if x.shape != eps.shape:
        raise InvalidArgumentError(f"dimension mismatch: x {tuple(x.shape)} vs eps {tuple(eps.shape)}")
    check_sigma(sigma)
    squeeze = x.dim() == 1
    if squeeze:
        x, eps = x.unsqueeze(0), eps.unsqueeze(0)
    s = sigma_column(sigma, x.shape[0])
    x_t = alpha(s) * x + s * eps
    return x_t.squeeze(0) if squeeze else x_t
