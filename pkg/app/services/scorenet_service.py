"""
Сервис сетей-денойзеров: предсказание x0, переход к ε и score, градиенты CFG и
отношения плотностей, денойзинг-предобучение.
"""
import logging
from typing import Iterable, Optional, Union

import torch
from torch.optim.lr_scheduler import CosineAnnealingLR

from app.exceptions import InvalidArgumentError, TrainingDivergedError
from app.models.denoiser import DTYPE, NULL_CLASS, Denoiser
from app.models.results import PretrainResult
from app.models.schemas import NoiseSchedule, PretrainConfig
from app.services.datasets_service import GaussianMixtureDataset, SyntheticDataset, build_dataset
from app.services.schedule_service import SigmaLike, alpha, check_sigma, sigma_column

logger = logging.getLogger(__name__)

ClassLike = Optional[Union[int, torch.Tensor]]


def _condition(net: Denoiser, c: ClassLike, batch: int) -> Optional[torch.Tensor]:
    if c is None:
        return None
    if net.cond_classes == 0:
        raise InvalidArgumentError("condition supplied to an unconditional net")
    if not isinstance(c, torch.Tensor):
        c = torch.full((batch,), int(c), dtype=torch.long)
    if bool((c >= net.cond_classes).any()) or bool((c < NULL_CLASS).any()):
        raise InvalidArgumentError(f"class id outside [0, {net.cond_classes})")
    return c


def denoise(net: Denoiser, x_t: torch.Tensor, sigma: SigmaLike, c: ClassLike = None) -> torch.Tensor:
    """Предсказание чистой точки f(x_t, σ, c); x_t формы [B, d]"""
    check_sigma(sigma)
    batch = x_t.shape[0]
    return net(x_t, sigma_column(sigma, batch), _condition(net, c, batch))


def eps_from_x0(x_t: torch.Tensor, sigma: SigmaLike, x0hat: torch.Tensor) -> torch.Tensor:
    """ε = (x_t - √(1-σ²)·x̂0) / σ"""
    check_sigma(sigma, strict_low=True)
    s = sigma_column(sigma, x_t.shape[0]) if x_t.dim() == 2 else torch.as_tensor(sigma, dtype=DTYPE)
    return (x_t - alpha(s) * x0hat) / s


def score(net: Denoiser, x_t: torch.Tensor, sigma: SigmaLike, c: ClassLike = None) -> torch.Tensor:
    """s(x_t, σ) = -(x_t - α·f)/σ² = -ε/σ"""
    check_sigma(sigma, strict_low=True)
    eps = eps_from_x0(x_t, sigma, denoise(net, x_t, sigma, c))
    return -eps / sigma_column(sigma, x_t.shape[0])


def cfg_gradient(net_psi: Denoiser, x_t: torch.Tensor, sigma: SigmaLike, c: ClassLike) -> torch.Tensor:
    """∇ log p(c | x_t) = s(x_t | c) - s(x_t)"""
    if net_psi.cond_classes == 0:
        raise InvalidArgumentError("CFG gradient needs a conditional net")
    return score(net_psi, x_t, sigma, c) - score(net_psi, x_t, sigma, None)


def density_ratio_gradient(net_a: Denoiser, net_b: Denoiser, x_t: torch.Tensor, sigma: SigmaLike) -> torch.Tensor:
    """∇ log p(A | x_t) = s_A(x_t) - s_B(x_t) по правилу Байеса"""
    if net_a.input_dim != net_b.input_dim or x_t.shape[-1] != net_a.input_dim:
        raise InvalidArgumentError(
            f"dimension mismatch: A={net_a.input_dim}, B={net_b.input_dim}, x_t={x_t.shape[-1]}"
        )
    return score(net_a, x_t, sigma) - score(net_b, x_t, sigma)


def _loss_weight(cfg: PretrainConfig, sigma: torch.Tensor) -> torch.Tensor:
    """Вес x0-потерь по уровню: 1 или min(α²/σ² + 1, max_snr)"""
    if cfg.loss_weighting == "uniform":
        return torch.ones_like(sigma)
    snr = alpha(sigma) ** 2 / sigma ** 2
    return (snr + 1.0).clamp(max=cfg.max_snr)


def _draw_sigmas(cfg: PretrainConfig, schedule: NoiseSchedule, batch: int,
                 generator: torch.Generator) -> torch.Tensor:
    if cfg.sigma_sampling == "schedule":
        ladder = torch.tensor(schedule.sigmas[1:], dtype=DTYPE)
        index = torch.randint(0, ladder.shape[0], (batch,), generator=generator)
        return ladder[index].reshape(-1, 1)
    # U(0, 1]
    return 1.0 - torch.rand(batch, 1, generator=generator, dtype=DTYPE)


def pretrain_denoiser(cfg: PretrainConfig, schedule: NoiseSchedule, seed: int,
                      init: Optional[Denoiser] = None) -> PretrainResult:
    """Минимизация E‖f(x_t, σ, c) - x0‖² по синтетическим данным"""
    dataset = build_dataset(cfg.dataset)
    if init is not None:
        if init.input_dim != dataset.dim or init.cond_classes != cfg.cond_classes:
            raise InvalidArgumentError("initial net does not match the dataset / condition setup")
        net = init.clone()
    else:
        net = Denoiser(dataset.dim, cfg.cond_classes, cfg.net.hidden_layers, cfg.net.width, seed=seed)

    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    scheduler = CosineAnnealingLR(optimizer, T_max=cfg.steps) if cfg.lr_schedule == "cosine" else None
    losses, learning_rates = [], []

    logger.info(
        f"Pretraining {cfg.dataset.name} denoiser: steps={cfg.steps}, batch={cfg.batch}, "
        f"cond_classes={cfg.cond_classes}, lr={cfg.lr} ({cfg.lr_schedule}), weighting={cfg.loss_weighting}, "
        f"params={net.parameter_count()}"
    )
    for step in range(cfg.steps):
        x0, labels = dataset.sample(cfg.batch, generator)
        sigma = _draw_sigmas(cfg, schedule, cfg.batch, generator)
        eps = torch.randn(cfg.batch, dataset.dim, generator=generator, dtype=DTYPE)
        x_t = alpha(sigma) * x0 + sigma * eps

        c = None
        if cfg.cond_classes > 0:
            dropped = torch.rand(cfg.batch, generator=generator, dtype=DTYPE) < cfg.label_dropout
            c = torch.where(dropped, torch.full_like(labels, NULL_CLASS), labels)

        last_state = {k: v.clone() for k, v in net.state_dict().items()}
        optimizer.zero_grad()
        per_sample = ((net(x_t, sigma, c) - x0) ** 2).sum(dim=1, keepdim=True)
        loss = (_loss_weight(cfg, sigma) * per_sample).mean()
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite pretraining loss at step {step}", iteration=step,
                                        last_state=last_state)
        loss.backward()
        learning_rates.append(optimizer.param_groups[0]["lr"])
        optimizer.step()
        if scheduler is not None:
            scheduler.step()
        losses.append(loss.item())

        if (step + 1) % cfg.log_every == 0:
            logger.info(f"Pretrain step {step + 1}/{cfg.steps}: loss={loss.item():.6f}")

    return PretrainResult(net=net, losses=losses, learning_rates=learning_rates)


def grid_points(dim: int, low: float = -2.0, high: float = 2.0, resolution: int = 21) -> torch.Tensor:
    """Равномерная сетка resolution^dim точек в кубе [low, high]^dim"""
    axis = torch.linspace(low, high, resolution, dtype=DTYPE)
    if dim == 1:
        return axis.reshape(-1, 1)
    return torch.cartesian_prod(*([axis] * dim))


@torch.no_grad()
def posterior_mean_error(net: Denoiser, dataset: SyntheticDataset,
                         sigmas: Iterable[float] = (0.3, 0.6, 0.9), resolution: int = 21) -> float:
    """Максимальное отклонение f от аналитического E[x0 | x_t] на равномерной сетке"""
    points = grid_points(dataset.dim, resolution=resolution)
    worst = 0.0
    for sigma in sigmas:
        deviation = (denoise(net, points, sigma) - dataset.posterior_mean(points, sigma)).abs().max().item()
        worst = max(worst, deviation)
    return worst


@torch.no_grad()
def bulk_posterior_error(net: Denoiser, dataset: GaussianMixtureDataset, sigmas: Iterable[float] = (0.3, 0.6, 0.9),
                         resolution: int = 21, spread: float = 2.0) -> float:
    """
    Максимальное |f - E[x0 | x_t]| там, где лежит масса зашумленных данных:
    для каждой компоненты куб α·m_j ± spread·√(α²s² + σ²).
    Для одноточечных данных E[x0 | x_t] = x*.
    """
    offsets = grid_points(dataset.dim, -spread, spread, resolution)
    worst = 0.0
    for sigma in sigmas:
        a = alpha(sigma)
        width = (a ** 2 * dataset.std ** 2 + sigma ** 2) ** 0.5
        points = torch.cat([a * mean + width * offsets for mean in dataset.means])
        deviation = (denoise(net, points, sigma) - dataset.posterior_mean(points, sigma)).abs().max().item()
        worst = max(worst, deviation)
    return worst


@torch.no_grad()
def score_rms_error(net: Denoiser, dataset: SyntheticDataset, sigma: float, resolution: int = 21) -> float:
    """RMS отклонения score сети от аналитического score на сетке [-2, 2]^d"""
    points = grid_points(dataset.dim, resolution=resolution)
    diff = score(net, points, sigma) - dataset.marginal_score(points, sigma)
    return torch.sqrt((diff ** 2).sum(dim=1).mean()).item()
