"""Small shared building blocks: seeded inits, factorized affine maps."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError

ACTIVATIONS = {
    "silu": F.silu,
    "gelu": F.gelu,
    "relu": F.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


def get_activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(
            f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}"
        ) from None


def scaled_width(base_at_768: int, d: int, minimum: int = 2) -> int:
    """Default hidden width/rank: the d=768 sizing scaled linearly with d."""
    return max(minimum, round(base_at_768 * d / 768))


def seeded_linear(
    in_features: int,
    out_features: int,
    *,
    gen: torch.Generator,
    dtype: torch.dtype,
    bias: bool = True,
    std: float | None = None,
    zero: bool = False,
) -> nn.Linear:
    """Linear layer whose init draws from ``gen`` instead of the global RNG."""
    lin = nn.Linear(in_features, out_features, bias=bias, dtype=dtype)
    with torch.no_grad():
        if zero:
            lin.weight.zero_()
        else:
            lin.weight.normal_(0.0, std if std is not None else in_features ** -0.5, generator=gen)
        if bias:
            lin.bias.zero_()
    return lin


class LowRankAffine(nn.Module):
    """Affine map parameterized as a rank-``r`` factorization ``up(down(x))``.

    ``zero_init`` zeroes the up-projection so the map starts at the constant
    zero function (bias included), which is how adapters begin as identities.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rank: int,
        *,
        gen: torch.Generator,
        dtype: torch.dtype,
        bias: bool = True,
        zero_init: bool = False,
    ):
        super().__init__()
        self.down = seeded_linear(in_features, rank, gen=gen, dtype=dtype, bias=False)
        self.up = seeded_linear(
            rank, out_features, gen=gen, dtype=dtype, bias=bias,
            std=rank ** -0.5, zero=zero_init,
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.up(self.down(x))


class ResidualMLP(nn.Module):
    """``x + lin2(act(lin1(x)))`` with the final map zero at init."""

    def __init__(
        self,
        d: int,
        hidden: int,
        activation: str,
        *,
        gen: torch.Generator,
        dtype: torch.dtype,
        residual: bool = True,
    ):
        super().__init__()
        self.lin1 = seeded_linear(d, hidden, gen=gen, dtype=dtype)
        self.lin2 = seeded_linear(hidden, d, gen=gen, dtype=dtype, zero=True)
        self.act = get_activation(activation)
        self.residual = residual

    def forward(self, x: Tensor) -> Tensor:
        y = self.lin2(self.act(self.lin1(x)))
        return x + y if self.residual else y


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
