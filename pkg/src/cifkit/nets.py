"""Small MLP building blocks: plain tanh MLPs, spectrally normalised residual nets, MADE."""
from __future__ import annotations

import math

import torch
from torch import nn

from .numcore import PowerIterState, lipswish, power_iteration, spectral_norm_normalize


class MLP(nn.Module):
    """``depth`` hidden layers of ``width`` units with tanh activations."""

    def __init__(self, in_dim: int, out_dim: int, width: int, depth: int, zero_init_output: bool = True):
        super().__init__()
        sizes = [in_dim] + [width] * depth + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        if zero_init_output:
            zero_module(self.layers[-1])

    @property
    def output_layer(self) -> nn.Linear:
        return self.layers[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)


def zero_module(module: nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class LipSwish(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return lipswish(x)


class SpectralLinear(nn.Module):
    """Linear layer whose weight is rescaled on every call to spectral norm <= kappa.

    The power-iteration vectors live in buffers so they warm-start across calls
    and survive checkpointing.
    """

    def __init__(self, in_dim: int, out_dim: int, kappa: float, tol: float = 1e-3, max_iter: int = 200):
        super().__init__()
        self.kappa = kappa
        self.tol = tol
        self.max_iter = max_iter
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self.bias = nn.Parameter(torch.empty(out_dim))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        bound = 1.0 / math.sqrt(in_dim)
        nn.init.uniform_(self.bias, -bound, bound)
        u = torch.randn(out_dim)
        v = torch.randn(in_dim)
        self.register_buffer("u", u / u.norm())
        self.register_buffer("v", v / v.norm())
        self.register_buffer("sigma", torch.tensor(0.0))
        state = PowerIterState(self.u, self.v)
        power_iteration(self.weight.detach(), state, tol * 1e-3, max_iter)
        self._store(state)

    def _store(self, state: PowerIterState) -> None:
        with torch.no_grad():
            self.u.copy_(state.u)
            self.v.copy_(state.v)
            self.sigma.fill_(state.sigma)

    def normalized_weight(self) -> torch.Tensor:
        """Normalised weight; the singular-vector estimates only advance in training mode."""
        if not self.training:
            sigma = self.u @ self.weight @ self.v
            if float(sigma.detach()) <= 0.0:
                return self.weight
            return self.weight / torch.clamp(sigma / self.kappa, min=1.0)
        state = PowerIterState(self.u, self.v, float(self.sigma))
        w = spectral_norm_normalize(self.weight, self.kappa, state, self.tol, self.max_iter)
        self._store(state)
        return w

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.linear(x, self.normalized_weight(), self.bias)


class ResidualNet(nn.Module):
    """Contractive map g: LipSwish before each spectrally normalised linear layer."""

    def __init__(self, dim: int, width: int, depth: int, kappa: float, sn_tol: float = 1e-3):
        super().__init__()
        sizes = [dim] + [width] * depth + [dim]
        self.linears = nn.ModuleList(
            SpectralLinear(a, b, kappa, sn_tol) for a, b in zip(sizes[:-1], sizes[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for linear in self.linears:
            x = linear(lipswish(x))
        return x

    def lipschitz_upper_bound(self) -> float:
        """Product of exact spectral norms of the normalised weights (activations are 1-Lipschitz)."""
        bound = 1.0
        with torch.no_grad():
            for linear in self.linears:
                bound *= float(torch.linalg.matrix_norm(linear.normalized_weight(), ord=2))
        return bound


class MaskedLinear(nn.Linear):
    def __init__(self, in_dim: int, out_dim: int, mask: torch.Tensor):
        super().__init__(in_dim, out_dim)
        self.register_buffer("mask", mask.to(self.weight.dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.linear(x, self.weight * self.mask, self.bias)


class MADE(nn.Module):
    """Autoregressive MLP emitting ``n_params`` values per input dimension.

    ``order[i]`` is the position of input ``i`` in the autoregressive ordering
    (0-based); output ``i`` only sees inputs with a strictly smaller position.
    Hidden degrees are assigned cyclically, so construction needs no randomness.
    """

    def __init__(self, dim: int, width: int, depth: int, order: list[int], n_params: int = 2,
                 zero_init_output: bool = True):
        super().__init__()
        self.dim = dim
        self.n_params = n_params
        in_deg = torch.as_tensor(order) + 1
        max_hidden = max(dim - 1, 1)
        degrees = [in_deg]
        for _ in range(depth):
            degrees.append(torch.arange(width) % max_hidden + 1)
        out_deg = in_deg.repeat(n_params)

        layers = []
        for prev, cur in zip(degrees[:-1], degrees[1:]):
            mask = (cur[:, None] >= prev[None, :])
            layers.append(MaskedLinear(len(prev), len(cur), mask))
        out_mask = out_deg[:, None] > degrees[-1][None, :]
        layers.append(MaskedLinear(len(degrees[-1]), dim * n_params, out_mask))
        self.layers = nn.ModuleList(layers)
        if zero_init_output:
            zero_module(self.layers[-1])

    @property
    def output_layer(self) -> nn.Linear:
        return self.layers[-1]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        h = x
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        out = self.layers[-1](h)
        return tuple(out.reshape(x.shape[0], self.n_params, self.dim).unbind(1))
