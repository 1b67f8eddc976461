import math
from typing import Any, Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64
NULL_CLASS = -1


class Denoiser(nn.Module):
    """
    Малая полносвязная сеть-денойзер: (x_t, σ, класс) -> предсказание x0.

    σ подается двумя признаками (σ, √(1-σ²)). Условие - one-hot блок через
    отдельное вложение без смещения; нулевой токен (класс -1 или None) дает
    нулевой вклад. Вложение условия инициализируется нулями, поэтому свежая
    условная сеть совпадает со своей безусловной версией.
    """

    sigma_embedding = "input features (sigma, sqrt(1 - sigma^2))"

    def __init__(self, input_dim: int, cond_classes: int = 0, hidden_layers: int = 3,
                 width: int = 64, seed: int = 0):
        super().__init__()
        self.input_dim = input_dim
        self.cond_classes = cond_classes
        self.hidden_layers = hidden_layers
        self.width = width

        dims = [input_dim + 2] + [width] * hidden_layers + [input_dim]
        self.layers = nn.ModuleList(
            nn.Linear(n_in, n_out, dtype=DTYPE) for n_in, n_out in zip(dims[:-1], dims[1:])
        )
        self.cond_embed = nn.Linear(cond_classes, width, bias=False, dtype=DTYPE) if cond_classes > 0 else None

        # Счетчик вызовов с включенным autograd (глубина дифференцируемого пути)
        self.differentiable_calls = 0
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Детерминированная инициализация U(-1/√fan_in, 1/√fan_in)"""
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                for param in (layer.weight, layer.bias):
                    param.copy_((torch.rand(param.shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound)
            if self.cond_embed is not None:
                self.cond_embed.weight.zero_()

    def forward(self, x: torch.Tensor, sigma: torch.Tensor, c: Optional[torch.Tensor] = None) -> torch.Tensor:
        if torch.is_grad_enabled():
            self.differentiable_calls += 1

        batch = x.shape[0]
        s = sigma.reshape(-1, 1).expand(batch, 1)
        a = torch.sqrt(torch.clamp(1.0 - s * s, min=0.0))
        h = self.layers[0](torch.cat([x, s, a], dim=1))

        if self.cond_embed is not None and c is not None:
            known = (c >= 0).unsqueeze(1).to(DTYPE)
            onehot = F.one_hot(c.clamp(min=0), self.cond_classes).to(DTYPE) * known
            h = h + self.cond_embed(onehot)

        h = torch.tanh(h)
        for layer in self.layers[1:-1]:
            h = torch.tanh(layer(h))
        return self.layers[-1](h)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def architecture(self) -> Dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "cond_classes": self.cond_classes,
            "hidden_layers": self.hidden_layers,
            "width": self.width,
        }

    def clone(self) -> "Denoiser":
        """Копия с теми же весами (θ инициализируется из φ)"""
        twin = Denoiser(**self.architecture())
        twin.load_state_dict(self.state_dict())
        return twin

    def freeze(self) -> "Denoiser":
        for param in self.parameters():
            param.requires_grad_(False)
        return self
