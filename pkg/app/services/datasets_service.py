"""
Реестр синтетических распределений для предобучения и аналитических оракулов.

point / gaussian / mixture - изотропные гауссовы смеси (точка - компонента с
нулевой дисперсией), для них известны зашумленные маргинальные score,
апостериорные средние и градиенты апостериорной вероятности класса.
"""
import math
from typing import Tuple

import torch

from app.exceptions import InvalidArgumentError
from app.models.denoiser import DTYPE
from app.models.schemas import DatasetSpec
from app.services.schedule_service import SigmaLike, alpha, sigma_column


class SyntheticDataset:
    """Базовый класс распределения"""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        self.dim = spec.data_dim
        self.num_classes = spec.num_classes

    def sample(self, n: int, generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def support_distance(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def marginal_score(self, x_t: torch.Tensor, sigma: SigmaLike) -> torch.Tensor:
        raise InvalidArgumentError(f"{self.spec.name} dataset has no closed-form noisy score")

    def posterior_mean(self, x_t: torch.Tensor, sigma: SigmaLike) -> torch.Tensor:
        raise InvalidArgumentError(f"{self.spec.name} dataset has no closed-form posterior mean")


class GaussianMixtureDataset(SyntheticDataset):
    """Равновесная смесь N(m_j, s²I)"""

    def __init__(self, spec: DatasetSpec):
        super().__init__(spec)
        self.means = torch.tensor(spec.centers, dtype=DTYPE)
        std = 0.0 if spec.name == "point" else spec.std
        self.std = math.sqrt(std ** 2 + spec.smoothing ** 2)

    def sample(self, n: int, generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        labels = torch.randint(0, self.means.shape[0], (n,), generator=generator)
        noise = torch.randn(n, self.dim, generator=generator, dtype=DTYPE)
        return self.means[labels] + self.std * noise, labels

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        if self.std == 0.0:
            raise InvalidArgumentError("a point mass has no density")
        sq = torch.cdist(x, self.means) ** 2
        log_comp = -sq / (2 * self.std ** 2) - 0.5 * self.dim * math.log(2 * math.pi * self.std ** 2)
        return torch.logsumexp(log_comp, dim=1) - math.log(self.means.shape[0])

    def support_distance(self, x: torch.Tensor) -> torch.Tensor:
        nearest = torch.cdist(x, self.means).min(dim=1).values
        return torch.clamp(nearest - 3 * self.std, min=0.0)

    # Noisy-level quantities: component j at level σ is N(α m_j, (α²s² + σ²) I)

    def _level(self, x_t: torch.Tensor, sigma: SigmaLike):
        s = sigma_column(sigma, x_t.shape[0])
        a = alpha(s)
        var = a * a * self.std ** 2 + s * s
        # diff[b, j, :] = x_t[b] - α_b m_j
        diff = x_t.unsqueeze(1) - a.unsqueeze(1) * self.means.unsqueeze(0)
        return a, var, diff

    def responsibilities(self, x_t: torch.Tensor, sigma: SigmaLike) -> torch.Tensor:
        _, var, diff = self._level(x_t, sigma)
        logits = -(diff ** 2).sum(dim=2) / (2 * var)
        return torch.softmax(logits, dim=1)

    def class_score(self, x_t: torch.Tensor, sigma: SigmaLike, c: int) -> torch.Tensor:
        _, var, diff = self._level(x_t, sigma)
        return -diff[:, c, :] / var

    def marginal_score(self, x_t: torch.Tensor, sigma: SigmaLike) -> torch.Tensor:
        _, var, diff = self._level(x_t, sigma)
        resp = self.responsibilities(x_t, sigma)
        return -(resp.unsqueeze(2) * diff).sum(dim=1) / var

    def class_posterior_gradient(self, x_t: torch.Tensor, sigma: SigmaLike, c: int) -> torch.Tensor:
        """∇ log p(c | x_t) = score(x_t | c) - score(x_t)"""
        return self.class_score(x_t, sigma, c) - self.marginal_score(x_t, sigma)

    def _component_means(self, x_t: torch.Tensor, sigma: SigmaLike) -> torch.Tensor:
        a, var, diff = self._level(x_t, sigma)
        gain = torch.where(var > 0, a * self.std ** 2 / torch.clamp(var, min=1e-300), torch.zeros_like(var))
        return self.means.unsqueeze(0) + gain.unsqueeze(1) * diff

    def posterior_mean(self, x_t: torch.Tensor, sigma: SigmaLike) -> torch.Tensor:
        resp = self.responsibilities(x_t, sigma)
        return (resp.unsqueeze(2) * self._component_means(x_t, sigma)).sum(dim=1)

    def class_posterior_mean(self, x_t: torch.Tensor, sigma: SigmaLike, c: int) -> torch.Tensor:
        return self._component_means(x_t, sigma)[:, c, :]


class UniformBoxDataset(SyntheticDataset):
    """Равномерное распределение на кубе [low, high]^d (с необязательным размытием)"""

    def __init__(self, spec: DatasetSpec):
        super().__init__(spec)
        self.low, self.high = spec.low, spec.high
        self.smoothing = spec.smoothing

    def sample(self, n: int, generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        u = torch.rand(n, self.dim, generator=generator, dtype=DTYPE)
        x = self.low + (self.high - self.low) * u
        if self.smoothing > 0:
            x = x + self.smoothing * torch.randn(n, self.dim, generator=generator, dtype=DTYPE)
        return x, torch.zeros(n, dtype=torch.long)

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        width = self.high - self.low
        if self.smoothing == 0:
            inside = ((x >= self.low) & (x <= self.high)).all(dim=1)
            value = torch.full((x.shape[0],), -self.dim * math.log(width), dtype=DTYPE)
            return torch.where(inside, value, torch.full_like(value, -math.inf))
        s = self.smoothing * math.sqrt(2.0)
        mass = 0.5 * (torch.special.erf((self.high - x) / s) - torch.special.erf((self.low - x) / s))
        return torch.log(mass / width).sum(dim=1)

    def support_distance(self, x: torch.Tensor) -> torch.Tensor:
        margin = 3 * self.smoothing
        below = torch.clamp((self.low - margin) - x, min=0.0)
        above = torch.clamp(x - (self.high + margin), min=0.0)
        return torch.linalg.vector_norm(below + above, dim=1)


def build_dataset(spec: DatasetSpec) -> SyntheticDataset:
    """Зарегистрированное распределение по спецификации"""
    if spec.name in ("point", "gaussian", "mixture"):
        return GaussianMixtureDataset(spec)
    if spec.name == "uniform":
        return UniformBoxDataset(spec)
    raise InvalidArgumentError(f"unknown dataset: {spec.name}")


def smoothed_spec(spec: DatasetSpec, extra_std: float) -> DatasetSpec:
    """То же распределение, свернутое с N(0, extra_std² I)"""
    smoothing = math.sqrt(spec.smoothing ** 2 + extra_std ** 2)
    return spec.model_copy(update={"smoothing": smoothing})
