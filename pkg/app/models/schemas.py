from enum import Enum
from typing import Annotated, Dict, List, Literal, Optional

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, model_validator

from app.config import settings


def _as_point_list(value):
    """Одна точка "1,1" разбирается как плоский список - заворачиваем в список точек"""
    if isinstance(value, (list, tuple)) and value and all(isinstance(v, (int, float)) for v in value):
        return [list(value)]
    return value


PointList = Annotated[List[List[float]], BeforeValidator(_as_point_list)]


class StrictModel(BaseModel):
    """Базовая модель: неизвестные ключи запрещены"""

    model_config = ConfigDict(extra="forbid")


# Data / schedule / network specs

class DatasetSpec(StrictModel):
    """Синтетическое распределение данных"""

    name: Literal["point", "gaussian", "mixture", "uniform"] = Field(..., description="Семейство распределения")
    centers: PointList = Field(default_factory=lambda: [[0.0, 0.0]], description="Центры компонент")
    std: float = Field(1.0, ge=0, description="СКО компоненты")
    low: float = Field(-2.0, description="Нижняя граница (uniform)")
    high: float = Field(2.0, description="Верхняя граница (uniform)")
    dim: int = Field(2, ge=1, description="Размерность (uniform)")
    smoothing: float = Field(0.0, ge=0, description="Дополнительное гауссово размытие")

    @model_validator(mode="after")
    def check_shape(self) -> "DatasetSpec":
        if not self.centers:
            raise ValueError("centers must not be empty")
        dims = {len(c) for c in self.centers}
        if len(dims) != 1 or 0 in dims:
            raise ValueError("all centers must share one positive dimension")
        if self.name in ("point", "gaussian") and len(self.centers) != 1:
            raise ValueError(f"{self.name} dataset takes exactly one center")
        if self.name == "uniform" and not self.high > self.low:
            raise ValueError("uniform dataset needs high > low")
        return self

    @property
    def data_dim(self) -> int:
        if self.name == "uniform":
            return self.dim
        return len(self.centers[0])

    @property
    def num_classes(self) -> int:
        return len(self.centers) if self.name == "mixture" else 1


class ScheduleSpec(StrictModel):
    steps: int = Field(4, ge=1, description="Число шагов генератора K")
    kind: Literal["linear", "cosine"] = Field("linear", description="Семейство лестницы σ")


class NetSpec(StrictModel):
    hidden_layers: int = Field(3, ge=1)
    width: int = Field(64, ge=1)


class NoiseSchedule(BaseModel):
    """Дискретная лестница уровней шума σ_0=0 < ... < σ_K=1"""

    model_config = ConfigDict(frozen=True)

    sigmas: tuple[float, ...]
    kind: Literal["linear", "cosine"] = "linear"

    @model_validator(mode="after")
    def check_ladder(self) -> "NoiseSchedule":
        s = self.sigmas
        if len(s) < 2:
            raise ValueError("schedule needs at least two levels")
        if s[0] != 0.0 or s[-1] != 1.0:
            raise ValueError("schedule must start at 0 and end at 1 exactly")
        if any(b <= a for a, b in zip(s[:-1], s[1:])):
            raise ValueError("schedule must be strictly increasing")
        return self

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1


# Pretraining

class PretrainConfig(StrictModel):
    """Параметры денойзинг-предобучения"""

    dataset: DatasetSpec
    steps: int = Field(2000, ge=1)
    batch: int = Field(128, ge=1)
    lr: float = Field(1e-3, gt=0)
    label_dropout: float = Field(0.1, ge=0, le=1)
    conditional: bool = Field(False, description="Обучать с условием (классом)")
    sigma_sampling: Literal["uniform", "schedule"] = "uniform"
    lr_schedule: Literal["constant", "cosine"] = Field("cosine", description="Косинусный спад lr до нуля за steps шагов")
    loss_weighting: Literal["uniform", "min_snr"] = "uniform"
    max_snr: float = Field(5.0, gt=0, description="Потолок веса min(SNR + 1, max_snr)")
    net: NetSpec = Field(default_factory=NetSpec)
    log_every: int = Field(500, ge=1)

    @property
    def cond_classes(self) -> int:
        return self.dataset.num_classes if self.conditional else 0


# Generation

class EtaPolicy(StrictModel):
    """Политика выбора η на шаге генератора"""

    mode: Literal["fixed", "random"] = "random"
    value: float = Field(1.0, ge=0, le=1, description="η для режима fixed")


# Rewards

class RewardKind(str, Enum):
    EXPLICIT = "explicit"
    CFG = "cfg-implicit"
    DENSITY_RATIO = "density-ratio"


IMPLICIT_REWARDS = {"cfg": RewardKind.CFG, "density_ratio": RewardKind.DENSITY_RATIO}


class RewardTerm(StrictModel):
    """Слагаемое награды с базовым весом ŵ_i"""

    name: str = Field(..., description="Имя в реестре наград")
    label: Optional[str] = Field(None, description="Имя для логов")
    base_weight: float = Field(1.0, gt=0)
    scale: float = Field(1.0, gt=0, description="Множитель явной награды")
    centers: PointList = Field(default_factory=list)
    tau: float = Field(1.0, gt=0)
    direction: List[float] = Field(default_factory=list)
    offset: float = 0.0
    lam: float = Field(1.0, ge=0)
    class_id: int = Field(0, ge=0)
    sigma_min: float = Field(0.2, ge=0, le=1)
    sigma_max: float = Field(0.8, ge=0, le=1)

    @model_validator(mode="after")
    def check_sigma_range(self) -> "RewardTerm":
        if self.sigma_min > self.sigma_max:
            raise ValueError("sigma_min must not exceed sigma_max")
        return self

    @property
    def kind(self) -> RewardKind:
        return IMPLICIT_REWARDS.get(self.name, RewardKind.EXPLICIT)

    @property
    def key(self) -> str:
        return self.label or self.name


def label_terms(terms: List[RewardTerm]) -> List[RewardTerm]:
    """Проставить уникальные метки слагаемым без label"""
    names = [t.name for t in terms]
    labelled = []
    for i, term in enumerate(terms):
        if term.label is None:
            label = term.name if names.count(term.name) == 1 else f"{term.name}_{i}"
            term = term.model_copy(update={"label": label})
        labelled.append(term)
    keys = [t.key for t in labelled]
    if len(set(keys)) != len(keys):
        raise ValueError(f"reward labels must be unique: {keys}")
    return labelled


# Training

class TrainConfig(StrictModel):
    """Гиперпараметры R0 / R0+"""

    mode: Literal["R0", "R0+"] = "R0"
    iterations: int = Field(1000, ge=1)
    batch: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    omega_reg: float = Field(0.1, ge=0)
    omega_cfg: float = Field(0.0, ge=0)
    cfg_class: int = Field(0, ge=0)
    rewards: List[RewardTerm] = Field(default_factory=list)
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    seed: int = 0
    k_weights: Optional[List[float]] = Field(None, description="Распределение шага k для R0+ (None = равномерное)")
    k_draw: Literal["sample", "batch"] = Field("sample", description="R0+: свой k на каждый сэмпл или один k на батч")
    eta: EtaPolicy = Field(default_factory=EtaPolicy)
    normalize: bool = True
    eps_floor: float = Field(default_factory=lambda: settings.eps_floor, gt=0)
    checkpoint_every: int = Field(0, ge=0)
    log_every: int = Field(100, ge=1)

    @model_validator(mode="after")
    def check_terms(self) -> "TrainConfig":
        if not self.rewards and self.omega_cfg == 0:
            raise ValueError("at least one reward term or omega_cfg > 0 is required")
        if any(t.name == "cfg" for t in self.rewards):
            raise ValueError("the CFG term is configured through omega_cfg / cfg_class")
        self.rewards = label_terms(self.rewards)
        if self.k_weights is not None:
            if len(self.k_weights) != self.schedule.steps:
                raise ValueError("k_weights needs one entry per generator step")
            if any(w < 0 for w in self.k_weights) or sum(self.k_weights) <= 0:
                raise ValueError("k_weights must be non-negative with a positive sum")
        return self

    def all_terms(self) -> List[RewardTerm]:
        """Явные награды + CFG-слагаемое с весом ω_cfg"""
        terms = list(self.rewards)
        if self.omega_cfg > 0:
            terms.append(RewardTerm(name="cfg", label="cfg", base_weight=self.omega_cfg, class_id=self.cfg_class))
        return terms


# Oracle

class GridSpec(StrictModel):
    """Сетка полного перебора"""

    bounds: PointList = Field(..., description="Отрезок [lo, hi] на каждую координату")
    resolution: int = Field(..., ge=2)

    @model_validator(mode="after")
    def check_bounds(self) -> "GridSpec":
        for lo_hi in self.bounds:
            if len(lo_hi) != 2 or not lo_hi[1] > lo_hi[0]:
                raise ValueError(f"degenerate bound {lo_hi}")
        return self

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def size(self) -> int:
        return self.resolution ** self.dim

    @property
    def spacing(self) -> List[float]:
        return [(hi - lo) / (self.resolution - 1) for lo, hi in self.bounds]


class LocalMax(BaseModel):
    point: List[float]
    value: float


class ModeReport(BaseModel):
    """Результат перебора: общий максимум и локальные максимумы"""

    argmax: List[float]
    max_value: float
    term_values: Dict[str, float]
    runners_up: List[LocalMax] = Field(default_factory=list)


class CoverageReport(BaseModel):
    per_mode: List[float]
    on_mode: float
    mean_min_distance: float


# Run configuration file

class PretrainSection(StrictModel):
    steps: int = Field(2000, ge=1)
    batch: int = Field(128, ge=1)
    lr: float = Field(1e-3, gt=0)
    label_dropout: float = Field(0.1, ge=0, le=1)
    sigma_sampling: Literal["uniform", "schedule"] = "uniform"
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    loss_weighting: Literal["uniform", "min_snr"] = "uniform"
    max_snr: float = Field(5.0, gt=0)
    smoothing: float = Field(0.5, ge=0, description="Размытие данных для сети B")
    finetune_steps: int = Field(1000, ge=1, description="Шаги дообучения сети B от φ")
    log_every: int = Field(500, ge=1)


class TrainSection(StrictModel):
    mode: Literal["R0", "R0+"] = "R0"
    iterations: int = Field(1000, ge=1)
    batch: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    omega_reg: float = Field(0.1, ge=0)
    omega_cfg: float = Field(0.0, ge=0)
    cfg_class: int = Field(0, ge=0)
    k_weights: Optional[List[float]] = None
    k_draw: Literal["sample", "batch"] = "sample"
    eta: EtaPolicy = Field(default_factory=EtaPolicy)
    normalize: bool = True
    eps_floor: float = Field(default_factory=lambda: settings.eps_floor, gt=0)
    checkpoint_every: int = Field(0, ge=0)
    log_every: int = Field(100, ge=1)


class CheckpointPaths(StrictModel):
    phi: Optional[str] = None
    psi: Optional[str] = None
    smoothed: Optional[str] = None


class EvalSection(StrictModel):
    radius: float = Field(0.3, gt=0)
    modes: Optional[PointList] = None
    top_n: int = Field(5, ge=0)


class RunConfig(StrictModel):
    """Файл конфигурации запуска"""

    seed: int = 0
    out: str = "run"
    dataset: Optional[DatasetSpec] = None
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    net: NetSpec = Field(default_factory=NetSpec)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    train: TrainSection = Field(default_factory=TrainSection)
    reward: List[RewardTerm] = Field(default_factory=list)
    checkpoints: CheckpointPaths = Field(default_factory=CheckpointPaths)
    grid: Optional[GridSpec] = None
    eval: EvalSection = Field(default_factory=EvalSection)

    def pretrain_config(self, conditional: bool = False, dataset: Optional[DatasetSpec] = None,
                        steps: Optional[int] = None) -> PretrainConfig:
        section = self.pretrain
        return PretrainConfig(
            dataset=dataset or self.dataset,
            steps=steps or section.steps,
            batch=section.batch,
            lr=section.lr,
            label_dropout=section.label_dropout,
            conditional=conditional,
            sigma_sampling=section.sigma_sampling,
            lr_schedule=section.lr_schedule,
            loss_weighting=section.loss_weighting,
            max_snr=section.max_snr,
            net=self.net,
            log_every=section.log_every,
        )

    def train_config(self) -> TrainConfig:
        section = self.train.model_dump()
        return TrainConfig(rewards=self.reward, schedule=self.schedule, seed=self.seed, **section)


class CheckpointMetadata(BaseModel):
    """Метаданные чекпоинта"""

    command: str
    role: str
    seed: int
    schedule: List[float]
    schedule_kind: str = "linear"
    input_dim: int
    cond_classes: int = 0
    hidden_layers: int = 3
    width: int = 64
