from typing import Dict, List, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.denoiser import Denoiser


class TensorModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)


class Trajectory(TensorModel):
    """Траектория генератора x_K .. x_0"""

    states: List[torch.Tensor]
    sigmas: List[float]
    etas: List[torch.Tensor]
    noises: List[torch.Tensor]
    x0_preds: List[torch.Tensor]

    @model_validator(mode="after")
    def check_lengths(self) -> "Trajectory":
        steps = len(self.states) - 1
        if steps < 1 or len(self.sigmas) != steps + 1:
            raise ValueError("trajectory needs K+1 states and levels")
        if not (len(self.etas) == len(self.noises) == len(self.x0_preds) == steps):
            raise ValueError("trajectory needs K entries per step sequence")
        return self

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]


class IntermediateSample(TensorModel):
    """Один дифференцируемый шаг после замороженного префикса цепочки"""

    step: int
    x0_pred: torch.Tensor
    x_out: torch.Tensor
    x_in: torch.Tensor
    sigma_in: float
    sigma_out: float


class IntermediateBatch(TensorModel):
    """
    Полная цепочка без градиента и один дифференцируемый шаг на строку:
    строка i учится на своем уровне σ_{k_i} -> σ_{k_i - 1}.
    """

    steps: torch.Tensor
    x0_pred: torch.Tensor
    x_out: torch.Tensor
    x_in: torch.Tensor
    sigma_in: torch.Tensor
    sigma_out: torch.Tensor
    final: torch.Tensor


class CombinedGradient(TensorModel):
    """Сумма нормированных градиентов наград по точке x"""

    total: torch.Tensor
    per_term: Dict[str, torch.Tensor]
    raw_norms: Dict[str, torch.Tensor]
    values: Dict[str, torch.Tensor]

    def contribution_norms(self) -> Dict[str, torch.Tensor]:
        return {key: torch.linalg.vector_norm(g, dim=-1) for key, g in self.per_term.items()}


class PretrainResult(TensorModel):
    net: Denoiser
    losses: List[float]
    learning_rates: List[float] = Field(default_factory=list)


class RunLogRecord(BaseModel):
    """Диагностика одной итерации обучения"""

    iteration: int
    term_raw_norms: Dict[str, float]
    term_values: Dict[str, float]
    term_contrib_norms: Dict[str, float]
    reg_loss: float
    reg_grad_norm: float
    reward_grad_norm: float
    cos_reward_reg: float
    combined_reward: float
    theta_dist: float
    diff_evals: int
    wall_ms: float = 0.0


class RunLog(BaseModel):
    """Журнал обучения: одна запись на итерацию"""

    term_labels: List[str]
    records: List[RunLogRecord] = Field(default_factory=list)

    def append(self, record: RunLogRecord) -> None:
        self.records.append(record)

    def columns(self) -> List[str]:
        columns = ["iter"]
        for label in self.term_labels:
            columns += [f"{label}.raw_norm", f"{label}.value"]
        columns += ["reg_loss", "reg_grad_norm", "reward_grad_norm", "cos_reward_reg",
                    "combined_reward", "theta_dist", "diff_evals", "wall_ms"]
        return columns

    def rows(self) -> List[Dict[str, float]]:
        rows = []
        for r in self.records:
            row: Dict[str, float] = {"iter": r.iteration}
            for label in self.term_labels:
                row[f"{label}.raw_norm"] = r.term_raw_norms[label]
                row[f"{label}.value"] = r.term_values[label]
            row.update(
                reg_loss=r.reg_loss,
                reg_grad_norm=r.reg_grad_norm,
                reward_grad_norm=r.reward_grad_norm,
                cos_reward_reg=r.cos_reward_reg,
                combined_reward=r.combined_reward,
                theta_dist=r.theta_dist,
                diff_evals=r.diff_evals,
                wall_ms=r.wall_ms,
            )
            rows.append(row)
        return rows

    def series(self, column: str) -> List[float]:
        return [row[column] for row in self.rows()]


class RewardContext(TensorModel):
    """Замороженные сети и ГСЧ, нужные неявным наградам"""

    net_psi: Optional[Denoiser] = None
    net_a: Optional[Denoiser] = None
    net_b: Optional[Denoiser] = None
    generator: Optional[torch.Generator] = None
