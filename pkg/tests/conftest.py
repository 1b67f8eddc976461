from pathlib import Path

import pytest
import torch

from app.config import settings
from app.models.denoiser import DTYPE, Denoiser
from app.models.schemas import DatasetSpec, RewardTerm
from app.services.datasets_service import GaussianMixtureDataset

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


class AnalyticMixtureDenoiser(Denoiser):
    """Денойзер с точным E[x0 | x_t] (и E[x0 | x_t, c]) гауссовой смеси"""

    def __init__(self, dataset: GaussianMixtureDataset, conditional: bool = False):
        super().__init__(dataset.dim, dataset.num_classes if conditional else 0, hidden_layers=1, width=4)
        self.dataset = dataset

    def forward(self, x, sigma, c=None):
        if torch.is_grad_enabled():
            self.differentiable_calls += 1
        mean = self.dataset.posterior_mean(x, sigma)
        if c is None or self.cond_classes == 0:
            return mean
        per_class = torch.stack(
            [self.dataset.class_posterior_mean(x, sigma, j) for j in range(self.cond_classes)], dim=1
        )
        picked = per_class[torch.arange(x.shape[0]), c.clamp(min=0)]
        return torch.where((c >= 0).unsqueeze(1), picked, mean)


def one_point_denoiser(point, seed: int = 0) -> Denoiser:
    """Сеть, которая при любом входе возвращает ровно point"""
    net = Denoiser(len(point), hidden_layers=2, width=8, seed=seed)
    with torch.no_grad():
        net.layers[-1].weight.zero_()
        net.layers[-1].bias.copy_(torch.tensor(point, dtype=DTYPE))
    return net


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    """Все артефакты тестов пишутся во временный каталог"""
    root = tmp_path / "runs"
    monkeypatch.setattr(settings, "output_root", root)
    return root


@pytest.fixture
def small_net():
    return Denoiser(2, hidden_layers=1, width=8, seed=3)


@pytest.fixture
def mixture_dataset():
    spec = DatasetSpec(name="mixture", centers=[[-1.0, 0.0], [1.0, 0.0]], std=0.3)
    return GaussianMixtureDataset(spec)


@pytest.fixture
def analytic_psi(mixture_dataset):
    return AnalyticMixtureDenoiser(mixture_dataset, conditional=True)


@pytest.fixture
def common_mode_terms():
    return [
        RewardTerm(name="mode_proximity", label="r1", centers=[[1, 1], [-1, 1]], tau=0.5),
        RewardTerm(name="mode_proximity", label="r2", centers=[[1, 1], [1, -1]], tau=0.5),
    ]


TINY_CONFIG = """\
# tiny end-to-end run
seed=7
out=tiny
dataset.name=mixture
dataset.centers=-1,0; 1,0
dataset.std=0.2
schedule.steps=2
net.hidden_layers=1
net.width=8
pretrain.steps=20
pretrain.batch=16
pretrain.finetune_steps=5
pretrain.log_every=10
train.iterations=6
train.batch=8
train.log_every=3
train.checkpoint_every=3
reward.0.name=mode_proximity
reward.0.centers=1,1
reward.0.tau=0.5
grid.bounds=-2,2; -2,2
grid.resolution=41
eval.radius=0.5
"""


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path
