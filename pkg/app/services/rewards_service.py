"""
Награды: аналитический зоопарк с точными градиентами, нормированное по
градиентам сложение нескольких наград и неявные награды (CFG и отношение
плотностей), которые отдают только градиент по x.
"""
import logging
from typing import Callable, Dict, Optional, Sequence, Tuple

import torch

from app.exceptions import InvalidArgumentError, NumericError
from app.models.denoiser import DTYPE, Denoiser
from app.models.results import CombinedGradient, RewardContext
from app.models.schemas import RewardKind, RewardTerm
from app.services.schedule_service import alpha
from app.services.scorenet_service import cfg_gradient, density_ratio_gradient

logger = logging.getLogger(__name__)

ValueAndGrad = Tuple[torch.Tensor, torch.Tensor]


# Explicit zoo: value [B] and exact gradient [B, d] for points x of shape [B, d]

def _mode_proximity(term: RewardTerm, x: torch.Tensor) -> ValueAndGrad:
    if not term.centers:
        raise InvalidArgumentError(f"reward {term.key} needs at least one center")
    centers = torch.tensor(term.centers, dtype=DTYPE)
    diff = x.unsqueeze(1) - centers.unsqueeze(0)
    bumps = torch.exp(-(diff ** 2).sum(dim=2) / (2 * term.tau ** 2))
    value = bumps.sum(dim=1)
    grad = -(bumps.unsqueeze(2) * diff).sum(dim=1) / term.tau ** 2
    return term.scale * value, term.scale * grad


def _half_space(term: RewardTerm, x: torch.Tensor) -> ValueAndGrad:
    if len(term.direction) != x.shape[1]:
        raise InvalidArgumentError(f"reward {term.key} direction must have {x.shape[1]} entries")
    a = torch.tensor(term.direction, dtype=DTYPE)
    t = torch.tanh(x @ a + term.offset)
    grad = (1 - t * t).unsqueeze(1) * a.unsqueeze(0)
    return term.scale * t, term.scale * grad


def _anti_saturation(term: RewardTerm, x: torch.Tensor) -> ValueAndGrad:
    value = -term.lam * (x ** 2).sum(dim=1)
    return term.scale * value, term.scale * (-2 * term.lam * x)


EXPLICIT_REWARDS: Dict[str, Callable[[RewardTerm, torch.Tensor], ValueAndGrad]] = {
    "mode_proximity": _mode_proximity,
    "half_space": _half_space,
    "anti_saturation": _anti_saturation,
}


def eval_explicit(term: RewardTerm, x: torch.Tensor, c: Optional[int] = None) -> ValueAndGrad:
    """Значение и точный градиент явной награды (класс зоопарком не используется)"""
    if term.kind != RewardKind.EXPLICIT:
        raise InvalidArgumentError(f"reward {term.key} is implicit and has no value")
    reward = EXPLICIT_REWARDS.get(term.name)
    if reward is None:
        raise InvalidArgumentError(f"unknown reward: {term.name}")
    squeeze = x.dim() == 1
    value, grad = reward(term, x.unsqueeze(0) if squeeze else x)
    return (value.squeeze(0), grad.squeeze(0)) if squeeze else (value, grad)


def weighted_value(terms: Sequence[RewardTerm], x: torch.Tensor) -> torch.Tensor:
    """Σ ŵ_i R_i(x) по явным слагаемым"""
    total = torch.zeros(x.shape[0], dtype=DTYPE)
    for term in terms:
        if term.kind == RewardKind.EXPLICIT:
            total = total + term.base_weight * eval_explicit(term, x)[0]
    return total


# Implicit rewards: gradient of -L/2 with respect to the clean point x,
# L = ‖x_t - sg(x_t + g)‖², x_t ~ q(x_t | x)

def draw_noisy(x: torch.Tensor, sigma_range: Tuple[float, float],
               generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """x_t = √(1-σ²)·x + σ·ε, σ ~ U[σ_min, σ_max] на сэмпл"""
    low, high = sigma_range
    if not 0.0 <= low <= high <= 1.0 or high == 0.0:
        raise InvalidArgumentError(f"invalid sigma range [{low}, {high}]")
    sigma = low + (high - low) * torch.rand(x.shape[0], 1, generator=generator, dtype=DTYPE)
    if bool((sigma == 0).any()):
        raise InvalidArgumentError("sigma draw produced the clean level 0")
    eps = torch.randn(x.shape, generator=generator, dtype=DTYPE)
    return alpha(sigma) * x + sigma * eps, sigma


@torch.no_grad()
def cfg_reward_pullback(net_psi: Denoiser, x: torch.Tensor, c: int,
                        sigma_range: Tuple[float, float] = (0.2, 0.8),
                        generator: Optional[torch.Generator] = None, seed: int = 0) -> torch.Tensor:
    """√(1-σ²)·∇ log p(c | x_t) в точке x_t ~ q(x_t | x)"""
    if net_psi.cond_classes == 0:
        raise InvalidArgumentError("CFG reward needs a conditional net")
    generator = generator or torch.Generator().manual_seed(seed)
    x_t, sigma = draw_noisy(x.detach(), sigma_range, generator)
    return alpha(sigma) * cfg_gradient(net_psi, x_t, sigma, c)


@torch.no_grad()
def density_ratio_pullback(net_a: Denoiser, net_b: Denoiser, x: torch.Tensor,
                           sigma_range: Tuple[float, float] = (0.2, 0.8),
                           generator: Optional[torch.Generator] = None, seed: int = 0) -> torch.Tensor:
    """√(1-σ²)·(s_A(x_t) - s_B(x_t)) в точке x_t ~ q(x_t | x)"""
    generator = generator or torch.Generator().manual_seed(seed)
    x_t, sigma = draw_noisy(x.detach(), sigma_range, generator)
    return alpha(sigma) * density_ratio_gradient(net_a, net_b, x_t, sigma)


def _raw_gradient(term: RewardTerm, x: torch.Tensor, aux: Optional[RewardContext]) -> ValueAndGrad:
    if term.kind == RewardKind.EXPLICIT:
        return eval_explicit(term, x)

    aux = aux or RewardContext()
    zero = torch.zeros(x.shape[0], dtype=DTYPE)
    sigma_range = (term.sigma_min, term.sigma_max)
    if term.kind == RewardKind.CFG:
        if aux.net_psi is None:
            raise InvalidArgumentError("CFG reward needs the conditional net psi")
        return zero, cfg_reward_pullback(aux.net_psi, x, term.class_id, sigma_range, aux.generator)
    if aux.net_a is None or aux.net_b is None:
        raise InvalidArgumentError("density-ratio reward needs nets A and B")
    return zero, density_ratio_pullback(aux.net_a, aux.net_b, x, sigma_range, aux.generator)


def _combine(terms: Sequence[RewardTerm], x: torch.Tensor, aux: Optional[RewardContext],
             eps_floor: float, normalize: bool) -> CombinedGradient:
    if not terms:
        raise InvalidArgumentError("at least one reward term is required")
    if eps_floor <= 0:
        raise InvalidArgumentError(f"eps_floor must be positive, got {eps_floor}")

    x = x.detach()
    total = torch.zeros_like(x)
    per_term: Dict[str, torch.Tensor] = {}
    raw_norms: Dict[str, torch.Tensor] = {}
    values: Dict[str, torch.Tensor] = {}
    for term in terms:
        value, grad = _raw_gradient(term, x, aux)
        if not bool(torch.isfinite(grad).all()) or not bool(torch.isfinite(value).all()):
            raise NumericError(f"non-finite gradient from reward {term.key}", term=term.key)
        norm = torch.linalg.vector_norm(grad, dim=1)
        if normalize:
            contribution = term.base_weight * grad / torch.clamp(norm, min=eps_floor).unsqueeze(1)
        else:
            contribution = term.base_weight * grad
        total = total + contribution
        per_term[term.key] = contribution
        raw_norms[term.key] = norm
        values[term.key] = value
    return CombinedGradient(total=total, per_term=per_term, raw_norms=raw_norms, values=values)


def combine_normalized(terms: Sequence[RewardTerm], x: torch.Tensor, aux: Optional[RewardContext] = None,
                       eps_floor: float = 1e-8) -> CombinedGradient:
    """Σ_i ŵ_i·g_i / max(‖g_i‖, ε) по каждому сэмплу; норма - константа"""
    return _combine(terms, x, aux, eps_floor, normalize=True)


def combine_weighted(terms: Sequence[RewardTerm], x: torch.Tensor, aux: Optional[RewardContext] = None,
                     eps_floor: float = 1e-8) -> CombinedGradient:
    """Σ_i ŵ_i·g_i с фиксированными весами (без нормировки)"""
    return _combine(terms, x, aux, eps_floor, normalize=False)

