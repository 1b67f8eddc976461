"""
Эталоны: полный перебор по сетке для общих мод наград, конечные разности
для проверки градиентов и метрики покрытия мод.
"""
import logging
from typing import Callable, List, Optional, Sequence, Union

import torch

from app.config import settings
from app.exceptions import InvalidArgumentError, NumericError
from app.models.denoiser import DTYPE
from app.models.schemas import CoverageReport, GridSpec, LocalMax, ModeReport, RewardKind, RewardTerm
from app.services.rewards_service import eval_explicit

logger = logging.getLogger(__name__)

MAX_GRID_DIM = 3
CHUNK = 1_000_000


def grid_points(grid: GridSpec) -> torch.Tensor:
    """Все узлы сетки [N, d] в порядке обхода (последняя координата быстрее всех)"""
    axes = [torch.linspace(lo, hi, grid.resolution, dtype=DTYPE) for lo, hi in grid.bounds]
    if grid.dim == 1:
        return axes[0].reshape(-1, 1)
    return torch.cartesian_prod(*axes)


def _local_maxima(values: torch.Tensor) -> torch.Tensor:
    """Маска узлов, строго больших всех соседей по осям"""
    mask = torch.ones_like(values, dtype=torch.bool)
    for axis in range(values.dim()):
        n = values.shape[axis]
        lower, upper = values.narrow(axis, 0, n - 1), values.narrow(axis, 1, n - 1)
        edge_shape = list(values.shape)
        edge_shape[axis] = 1
        edge = torch.ones(edge_shape, dtype=torch.bool)
        mask &= torch.cat([edge, upper > lower], dim=axis)
        mask &= torch.cat([lower > upper, edge], dim=axis)
    return mask


def grid_argmax(terms: Sequence[RewardTerm], grid: GridSpec, weights: Optional[Sequence[float]] = None,
                top_n: int = 5, budget: Optional[int] = None) -> ModeReport:
    """Перебор Σ ŵ_i R_i(x) по всем узлам сетки"""
    budget = budget or settings.grid_budget
    if not terms:
        raise InvalidArgumentError("grid search needs at least one reward term")
    if any(term.kind != RewardKind.EXPLICIT for term in terms):
        raise InvalidArgumentError("grid search accepts explicit rewards only")
    if grid.dim > MAX_GRID_DIM:
        raise InvalidArgumentError(f"grid search is limited to d <= {MAX_GRID_DIM}, got {grid.dim}")
    if grid.size > budget:
        raise InvalidArgumentError(f"grid of {grid.size} points exceeds the budget of {budget}")
    weights = list(weights) if weights is not None else [term.base_weight for term in terms]
    if len(weights) != len(terms):
        raise InvalidArgumentError("one weight per reward term is required")

    points = grid_points(grid)
    total = torch.empty(points.shape[0], dtype=DTYPE)
    for start in range(0, points.shape[0], CHUNK):
        chunk = points[start:start + CHUNK]
        acc = torch.zeros(chunk.shape[0], dtype=DTYPE)
        for term, weight in zip(terms, weights):
            acc += weight * eval_explicit(term, chunk)[0]
        total[start:start + CHUNK] = acc

    best = int(torch.argmax(total))
    argmax = points[best]
    term_values = {term.key: eval_explicit(term, argmax)[0].item() for term in terms}

    shaped = total.reshape([grid.resolution] * grid.dim)
    local = torch.nonzero(_local_maxima(shaped).reshape(-1)).reshape(-1)
    local = local[local != best]
    order = torch.argsort(total[local], descending=True, stable=True)[:top_n]
    runners_up = [LocalMax(point=points[i].tolist(), value=total[i].item()) for i in local[order]]

    logger.info(f"Grid argmax over {grid.size} points: {argmax.tolist()} value={total[best].item():.6f}")
    return ModeReport(argmax=argmax.tolist(), max_value=total[best].item(), term_values=term_values,
                      runners_up=runners_up)


ScalarField = Callable[[torch.Tensor], Union[float, torch.Tensor]]


def finite_diff_gradient(f: ScalarField, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Центральные разности (f(x+h·e_j) - f(x-h·e_j)) / 2h"""
    if h <= 0:
        raise InvalidArgumentError(f"finite-difference step must be positive, got {h}")
    x = x.detach().to(DTYPE).reshape(-1)
    grad = torch.empty_like(x)
    for j in range(x.shape[0]):
        step = torch.zeros_like(x)
        step[j] = h
        plus, minus = float(f(x + step)), float(f(x - step))
        if not (torch.isfinite(torch.tensor(plus)) and torch.isfinite(torch.tensor(minus))):
            raise NumericError(f"non-finite function value at coordinate {j}")
        grad[j] = (plus - minus) / (2 * h)
    return grad


def mode_coverage(samples: torch.Tensor, modes: Union[torch.Tensor, List[List[float]]],
                  radius: float) -> CoverageReport:
    """Доли сэмплов в шаре радиуса radius вокруг каждой моды и вокруг любой"""
    if radius <= 0:
        raise InvalidArgumentError(f"radius must be positive, got {radius}")
    modes = torch.as_tensor(modes, dtype=DTYPE)
    if samples.shape[0] == 0:
        raise InvalidArgumentError("mode coverage needs at least one sample")
    if modes.numel() == 0:
        raise InvalidArgumentError("mode coverage needs at least one mode")
    dist = torch.cdist(samples.to(DTYPE), modes.reshape(-1, samples.shape[1]))
    hits = dist <= radius
    return CoverageReport(
        per_mode=hits.to(DTYPE).mean(dim=0).tolist(),
        on_mode=hits.any(dim=1).to(DTYPE).mean().item(),
        mean_min_distance=dist.min(dim=1).values.mean().item(),
    )


def diag_cosine(g1: torch.Tensor, g2: torch.Tensor) -> float:
    """cos(g1, g2); 0 если один из векторов нулевой"""
    g1, g2 = g1.reshape(-1).to(DTYPE), g2.reshape(-1).to(DTYPE)
    n1, n2 = torch.linalg.vector_norm(g1), torch.linalg.vector_norm(g2)
    if n1 == 0 or n2 == 0:
        return 0.0
    return max(-1.0, min(1.0, (torch.dot(g1, g2) / (n1 * n2)).item()))
