"""
Обучение генератора максимизацией наград с регуляризацией весов.

R0 проводит градиент через всю K-шаговую цепочку. R0+ тянет цепочку без
градиента, дает каждому сэмплу случайный шаг k и учит этот шаг по
промежуточному предсказанию x0, так что глубина обратного прохода не зависит
от K. Обе моды пишут в журнал награду итогового x_0 одной и той же цепочки.
"""
import logging
import time
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from app.config import settings
from app.exceptions import InvalidArgumentError, NumericError, TrainingDivergedError
from app.models.denoiser import DTYPE, Denoiser
from app.models.results import CombinedGradient, RewardContext, RunLog, RunLogRecord
from app.models.schemas import NoiseSchedule, RewardKind, TrainConfig
from app.services.generator_service import generate, generate_with_intermediate_rows
from app.services.oracle_service import diag_cosine
from app.services.rewards_service import combine_normalized, combine_weighted, weighted_value
from app.services.schedule_service import make_schedule

logger = logging.getLogger(__name__)

ParamsLike = Union[nn.Module, Sequence[torch.Tensor], dict]
CheckpointHook = Callable[[int, Denoiser], None]


def _param_list(params: ParamsLike) -> List[torch.Tensor]:
    if isinstance(params, nn.Module):
        return list(params.parameters())
    if isinstance(params, dict):
        return list(params.values())
    return list(params)


def weight_reg(theta: ParamsLike, phi: ParamsLike) -> torch.Tensor:
    """‖θ - φ‖² по всем блокам параметров"""
    theta, phi = _param_list(theta), _param_list(phi)
    if len(theta) != len(phi):
        raise InvalidArgumentError(f"parameter block count mismatch: {len(theta)} vs {len(phi)}")
    total = torch.zeros((), dtype=DTYPE)
    for i, (t, p) in enumerate(zip(theta, phi)):
        if t.shape != p.shape:
            raise InvalidArgumentError(f"parameter block {i} shape mismatch: {tuple(t.shape)} vs {tuple(p.shape)}")
        total = total + ((t - p.detach()) ** 2).sum()
    return total


def _flat(grads: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat([g.reshape(-1) for g in grads])


class RewardTrainer:
    """Цикл обучения R0 / R0+ для одной конфигурации"""

    def __init__(self, cfg: TrainConfig, phi: Denoiser, psi: Optional[Denoiser] = None,
                 net_a: Optional[Denoiser] = None, net_b: Optional[Denoiser] = None,
                 schedule: Optional[NoiseSchedule] = None, checkpoint_hook: Optional[CheckpointHook] = None):
        self.cfg = cfg
        self.schedule = schedule or make_schedule(cfg.schedule.steps, cfg.schedule.kind)
        if self.schedule.steps != cfg.schedule.steps:
            raise InvalidArgumentError("schedule does not match the configured step count")

        self.terms = cfg.all_terms()
        self.explicit = [t for t in self.terms if t.kind == RewardKind.EXPLICIT]
        self.implicit = [t for t in self.terms if t.kind != RewardKind.EXPLICIT]
        if any(t.kind == RewardKind.CFG for t in self.implicit) and psi is None:
            raise InvalidArgumentError("omega_cfg > 0 needs the conditional net psi")
        if any(t.kind == RewardKind.DENSITY_RATIO for t in self.implicit) and net_b is None:
            raise InvalidArgumentError("density-ratio reward needs the smoothed-data net")

        self.theta = phi.clone()
        self.anchor = [p.detach().clone() for p in phi.parameters()]
        self.psi = psi.freeze() if psi is not None else None
        self.net_a = (net_a or phi.clone()).freeze()
        self.net_b = net_b.freeze() if net_b is not None else None
        self.checkpoint_hook = checkpoint_hook

        # Основной поток ГСЧ: z, η, ε и σ-выборки неявных наград; k для R0+ идет отдельно
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.k_generator = torch.Generator().manual_seed(cfg.seed + 1)
        self.optimizer = torch.optim.Adam(self.theta.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
        self.log = RunLog(term_labels=[t.key for t in self.terms])

    def _combine(self, terms, x: torch.Tensor, aux: Optional[RewardContext]) -> Optional[CombinedGradient]:
        if not terms:
            return None
        combine = combine_normalized if self.cfg.normalize else combine_weighted
        return combine(terms, x, aux, self.cfg.eps_floor)

    def _draw_k(self) -> torch.Tensor:
        """Шаги k_i по строкам батча (k_draw=batch - один k на всех)"""
        steps = self.schedule.steps
        probs = torch.tensor(self.cfg.k_weights or [1.0] * steps, dtype=DTYPE)
        if self.cfg.k_draw == "batch":
            k = torch.multinomial(probs, 1, generator=self.k_generator) + 1
            return k.expand(self.cfg.batch).clone()
        return torch.multinomial(probs, self.cfg.batch, replacement=True, generator=self.k_generator) + 1

    def _forward(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(точка явных наград, точка неявных наград, итоговый x_0 для логов)"""
        if self.cfg.mode == "R0":
            x0 = generate(self.theta, z, self.schedule, self.cfg.eta, generator=self.generator).final
            return x0, x0, x0.detach()
        sample = generate_with_intermediate_rows(self.theta, z, self.schedule, self._draw_k(), self.cfg.eta,
                                                 generator=self.generator)
        return sample.x0_pred, sample.x_out, sample.final

    def step(self, iteration: int) -> RunLogRecord:
        started = time.perf_counter()
        cfg = self.cfg
        params = list(self.theta.parameters())
        last_state = {k: v.detach().clone() for k, v in self.theta.state_dict().items()}

        z = torch.randn(cfg.batch, self.theta.input_dim, generator=self.generator, dtype=DTYPE)
        self.theta.differentiable_calls = 0
        x_reward, x_cfg, x_final = self._forward(z)
        diff_evals = self.theta.differentiable_calls

        aux = RewardContext(net_psi=self.psi, net_a=self.net_a, net_b=self.net_b, generator=self.generator)
        try:
            explicit = self._combine(self.explicit, x_reward, None)
            implicit = self._combine(self.implicit, x_cfg, aux)
        except NumericError as exc:
            raise TrainingDivergedError(f"iteration {iteration}: {exc.detail}", iteration=iteration,
                                        last_state=last_state) from exc

        # Surrogate whose parameter gradient is minus the pullback of the combined x-gradients
        surrogate = torch.zeros((), dtype=DTYPE)
        if explicit is not None:
            surrogate = surrogate - (explicit.total * x_reward).sum() / cfg.batch
        if implicit is not None:
            surrogate = surrogate - (implicit.total * x_cfg).sum() / cfg.batch
        reg_loss = weight_reg(params, self.anchor)

        reward_grads = torch.autograd.grad(surrogate, params, allow_unused=True)
        reward_grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(reward_grads, params)]
        reg_grads = torch.autograd.grad(cfg.omega_reg * reg_loss, params)

        reward_flat, reg_flat = _flat(reward_grads), _flat(reg_grads)
        if not (torch.isfinite(surrogate) and torch.isfinite(reward_flat).all() and torch.isfinite(reg_flat).all()):
            raise TrainingDivergedError(f"non-finite gradient at iteration {iteration}", iteration=iteration,
                                        last_state=last_state)

        self.optimizer.zero_grad()
        for p, g_reward, g_reg in zip(params, reward_grads, reg_grads):
            p.grad = g_reward + g_reg
        self.optimizer.step()

        with torch.no_grad():
            theta_dist = torch.sqrt(weight_reg(params, self.anchor)).item()
        record = RunLogRecord(
            iteration=iteration,
            term_raw_norms=self._per_term(explicit, implicit, "raw_norms"),
            term_values=self._per_term(explicit, implicit, "values"),
            term_contrib_norms=self._contribution_norms(explicit, implicit),
            reg_loss=reg_loss.item(),
            reg_grad_norm=torch.linalg.vector_norm(reg_flat).item(),
            reward_grad_norm=torch.linalg.vector_norm(reward_flat).item(),
            cos_reward_reg=diag_cosine(reward_flat, reg_flat),
            combined_reward=weighted_value(self.explicit, x_final).mean().item() if self.explicit else 0.0,
            theta_dist=theta_dist,
            diff_evals=diff_evals,
            wall_ms=(time.perf_counter() - started) * 1000 if settings.record_wall_clock else 0.0,
        )
        self.log.append(record)
        return record

    @staticmethod
    def _per_term(explicit, implicit, field: str):
        out = {}
        for combined in (explicit, implicit):
            if combined is not None:
                out.update({key: v.mean().item() for key, v in getattr(combined, field).items()})
        return out

    @staticmethod
    def _contribution_norms(explicit, implicit):
        out = {}
        for combined in (explicit, implicit):
            if combined is not None:
                out.update({key: v.mean().item() for key, v in combined.contribution_norms().items()})
        return out

    def run(self) -> Tuple[Denoiser, RunLog]:
        cfg = self.cfg
        logger.info(
            f"Training {cfg.mode}: K={self.schedule.steps}, iterations={cfg.iterations}, batch={cfg.batch}, "
            f"terms={self.log.term_labels}, omega_reg={cfg.omega_reg}, normalize={cfg.normalize}"
        )
        for iteration in range(cfg.iterations):
            record = self.step(iteration)
            if (iteration + 1) % cfg.log_every == 0:
                logger.info(
                    f"Iteration {iteration + 1}/{cfg.iterations}: combined_reward={record.combined_reward:.4f} "
                    f"reward_grad={record.reward_grad_norm:.4e} reg_grad={record.reg_grad_norm:.4e} "
                    f"cos={record.cos_reward_reg:.3f} theta_dist={record.theta_dist:.4f}"
                )
            if cfg.checkpoint_every and (iteration + 1) % cfg.checkpoint_every == 0 and self.checkpoint_hook:
                self.checkpoint_hook(iteration + 1, self.theta)
        return self.theta, self.log


def train_r0(cfg: TrainConfig, phi: Denoiser, psi: Optional[Denoiser] = None,
             net_a: Optional[Denoiser] = None, net_b: Optional[Denoiser] = None,
             checkpoint_hook: Optional[CheckpointHook] = None) -> Tuple[Denoiser, RunLog]:
    """Алгоритм R0: градиент через всю цепочку"""
    if cfg.mode != "R0":
        cfg = cfg.model_copy(update={"mode": "R0"})
    return RewardTrainer(cfg, phi, psi, net_a, net_b, checkpoint_hook=checkpoint_hook).run()


def train_r0plus(cfg: TrainConfig, phi: Denoiser, psi: Optional[Denoiser] = None,
                 net_a: Optional[Denoiser] = None, net_b: Optional[Denoiser] = None,
                 checkpoint_hook: Optional[CheckpointHook] = None) -> Tuple[Denoiser, RunLog]:
    """R0+: промежуточный надзор по случайному шагу k"""
    if cfg.mode != "R0+":
        cfg = cfg.model_copy(update={"mode": "R0+"})
    return RewardTrainer(cfg, phi, psi, net_a, net_b, checkpoint_hook=checkpoint_hook).run()


def train(cfg: TrainConfig, phi: Denoiser, psi: Optional[Denoiser] = None,
          net_a: Optional[Denoiser] = None, net_b: Optional[Denoiser] = None,
          checkpoint_hook: Optional[CheckpointHook] = None) -> Tuple[Denoiser, RunLog]:
    runner = train_r0 if cfg.mode == "R0" else train_r0plus
    return runner(cfg, phi, psi, net_a, net_b, checkpoint_hook)


def iterations_to_threshold(log: RunLog, threshold: float, column: str = "combined_reward") -> Optional[int]:
    """Число итераций до первого значения column >= threshold (None - не достигнуто)"""
    for index, value in enumerate(log.series(column)):
        if value >= threshold:
            return index + 1
    return None


def last_quartile_slope(values: Sequence[float]) -> float:
    """Наклон МНК-прямой по последней четверти ряда"""
    tail = np.asarray(values[-max(len(values) // 4, 2):], dtype=np.float64)
    if tail.shape[0] < 2:
        return 0.0
    return float(np.polyfit(np.arange(tail.shape[0], dtype=np.float64), tail, 1)[0])
