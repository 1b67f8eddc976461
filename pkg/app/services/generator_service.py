"""
K-шаговый генератор: шаг DDIM со смешиванием ε по η, полная цепочка и
промежуточный дифференцируемый шаг с замороженным префиксом (R0+).
"""
import math
from typing import Optional, Tuple

import torch

from app.exceptions import InvalidArgumentError
from app.models.denoiser import DTYPE, Denoiser
from app.models.results import IntermediateBatch, IntermediateSample, Trajectory
from app.models.schemas import EtaPolicy, NoiseSchedule
from app.services.schedule_service import SigmaLike, alpha, sigma_column
from app.services.scorenet_service import ClassLike, denoise, eps_from_x0


def gen_step(net: Denoiser, x_k: torch.Tensor, sigma_k: float, sigma_prev: float, eta: SigmaLike,
             eps: torch.Tensor, c: ClassLike = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Один шаг σ_k -> σ_prev; возвращает (x_prev, x0_pred)"""
    if not 0.0 < sigma_k <= 1.0:
        raise InvalidArgumentError(f"sigma_k must lie in (0, 1], got {sigma_k}")
    if not 0.0 <= sigma_prev < sigma_k:
        raise InvalidArgumentError(f"sigma_prev must lie in [0, sigma_k), got {sigma_prev} >= {sigma_k}")

    x0_pred = denoise(net, x_k, sigma_k, c)
    if sigma_prev == 0.0:
        return x0_pred, x0_pred

    # At σ=1 the state is pure noise, so the residual is x_k itself
    eps_theta = x_k if sigma_k == 1.0 else eps_from_x0(x_k, sigma_k, x0_pred)
    eta = sigma_column(eta, x_k.shape[0])
    eps_hat = eta * eps_theta + torch.sqrt(1.0 - eta * eta) * eps
    x_prev = math.sqrt(1.0 - sigma_prev * sigma_prev) * x0_pred + sigma_prev * eps_hat
    return x_prev, x0_pred


def draw_eta(policy: EtaPolicy, batch: int, generator: torch.Generator) -> torch.Tensor:
    """η на шаг: одно значение на сэмпл (random) или константа (fixed)"""
    if policy.mode == "random":
        return torch.rand(batch, 1, generator=generator, dtype=DTYPE)
    return torch.full((batch, 1), policy.value, dtype=DTYPE)


def _step_noise(policy: EtaPolicy, batch: int, dim: int,
                generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    eta = draw_eta(policy, batch, generator)
    eps = torch.randn(batch, dim, generator=generator, dtype=DTYPE)
    return eta, eps


def generate(net: Denoiser, z: torch.Tensor, schedule: NoiseSchedule, policy: EtaPolicy,
             c: ClassLike = None, seed: int = 0,
             generator: Optional[torch.Generator] = None) -> Trajectory:
    """Композиция g_{σ_1} ∘ ... ∘ g_{σ_K}(z) с записью траектории"""
    if z.dim() != 2 or z.shape[1] != net.input_dim:
        raise InvalidArgumentError(f"noise of shape {tuple(z.shape)} does not match net dimension {net.input_dim}")
    generator = generator or torch.Generator().manual_seed(seed)
    sigmas = schedule.sigmas
    batch, dim = z.shape

    states, etas, noises, x0_preds = [z], [], [], []
    x = z
    for k in range(schedule.steps, 0, -1):
        eta, eps = _step_noise(policy, batch, dim, generator)
        x, x0_pred = gen_step(net, x, sigmas[k], sigmas[k - 1], eta, eps, c)
        states.append(x)
        etas.append(eta)
        noises.append(eps)
        x0_preds.append(x0_pred)

    return Trajectory(states=states, sigmas=list(reversed(sigmas)), etas=etas, noises=noises, x0_preds=x0_preds)


def generate_with_intermediate(net: Denoiser, z: torch.Tensor, schedule: NoiseSchedule, k: int,
                               policy: EtaPolicy, c: ClassLike = None, seed: int = 0,
                               generator: Optional[torch.Generator] = None) -> IntermediateSample:
    """
    Префикс цепочки σ_K .. σ_{k+1} без градиента, затем один дифференцируемый
    шаг σ_k -> σ_{k-1}. При k = K префикса нет.
    """
    steps = schedule.steps
    if not 1 <= k <= steps:
        raise InvalidArgumentError(f"step index must lie in [1, {steps}], got {k}")
    generator = generator or torch.Generator().manual_seed(seed)
    sigmas = schedule.sigmas
    batch, dim = z.shape

    x_in = z
    with torch.no_grad():
        for j in range(steps, k, -1):
            eta, eps = _step_noise(policy, batch, dim, generator)
            x_in, _ = gen_step(net, x_in, sigmas[j], sigmas[j - 1], eta, eps, c)
    x_in = x_in.detach()

    eta, eps = _step_noise(policy, batch, dim, generator)
    x_out, x0_pred = gen_step(net, x_in, sigmas[k], sigmas[k - 1], eta, eps, c)
    return IntermediateSample(step=k, x0_pred=x0_pred, x_out=x_out, x_in=x_in,
                              sigma_in=sigmas[k], sigma_out=sigmas[k - 1])


def generate_with_intermediate_rows(net: Denoiser, z: torch.Tensor, schedule: NoiseSchedule, ks: torch.Tensor,
                                    policy: EtaPolicy, c: ClassLike = None, seed: int = 0,
                                    generator: Optional[torch.Generator] = None) -> IntermediateBatch:
    """
    Вариант generate_with_intermediate со своим шагом k_i на каждую строку.

    Цепочка σ_K .. σ_0 проходит целиком без градиента на тех же η и ε, что и
    generate, и запоминает вход каждой строки на ее уровне. Затем все строки
    делают один общий дифференцируемый вызов сети с σ по строкам; x_out строки
    совпадает с состоянием цепочки на уровне σ_{k_i - 1}, final - итог цепочки.
    """
    steps = schedule.steps
    if z.dim() != 2 or z.shape[1] != net.input_dim:
        raise InvalidArgumentError(f"noise of shape {tuple(z.shape)} does not match net dimension {net.input_dim}")
    ks = torch.as_tensor(ks, dtype=torch.long).reshape(-1)
    if ks.shape[0] != z.shape[0]:
        raise InvalidArgumentError(f"need one step index per row, got {ks.shape[0]} for {z.shape[0]} rows")
    if bool((ks < 1).any()) or bool((ks > steps).any()):
        raise InvalidArgumentError(f"step indices must lie in [1, {steps}]")
    generator = generator or torch.Generator().manual_seed(seed)
    sigmas = schedule.sigmas
    batch, dim = z.shape

    x_in = torch.zeros_like(z)
    eta_in = torch.zeros(batch, 1, dtype=DTYPE)
    eps_in = torch.zeros_like(z)
    with torch.no_grad():
        x = z
        for j in range(steps, 0, -1):
            eta, eps = _step_noise(policy, batch, dim, generator)
            here = (ks == j).unsqueeze(1)
            x_in = torch.where(here, x, x_in)
            eta_in = torch.where(here, eta, eta_in)
            eps_in = torch.where(here, eps, eps_in)
            x, _ = gen_step(net, x, sigmas[j], sigmas[j - 1], eta, eps, c)
    final = x

    table = torch.tensor(sigmas, dtype=DTYPE)
    sigma_in = table[ks].reshape(-1, 1)
    sigma_out = table[ks - 1].reshape(-1, 1)
    x_in = x_in.detach()
    x0_pred = denoise(net, x_in, sigma_in, c)
    eps_theta = eps_from_x0(x_in, sigma_in, x0_pred)
    eps_hat = eta_in * eps_theta + torch.sqrt(1.0 - eta_in * eta_in) * eps_in
    x_out = alpha(sigma_out) * x0_pred + sigma_out * eps_hat
    return IntermediateBatch(steps=ks, x0_pred=x0_pred, x_out=x_out, x_in=x_in, sigma_in=sigma_in,
                             sigma_out=sigma_out, final=final)
