"""Continuously indexed flows and the exact-likelihood flow baseline.

A CIF layer wraps a bijection ``f`` into the family
``F(z; u) = f(exp(-s(u)) * z - t(u))`` and carries two conditional Gaussians
over the index ``u``: ``p(u | z_prev)`` for generation and ``q(u | z)`` for
inference. ``CifStack.elbo`` is the single-sample ELBO estimator that visits
layers from the data side back to the prior.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .bijections import Bijection, Compose
from .nets import MLP, zero_module
from .numcore import SeededRng, check_finite, gaussian_logpdf, log_mean_exp, standard_normal_logpdf

Q_LOG_SCALE_BOUNDS = (-7.0, 7.0)


class CondGaussianHead(nn.Module):
    """Diagonal Gaussian over ``out_dim`` values whose mean and log-std come from an MLP."""

    def __init__(self, in_dim: int, out_dim: int, width: int = 10, depth: int = 2,
                 log_scale_bounds: tuple[float, float] | None = None):
        super().__init__()
        self.out_dim = out_dim
        self.log_scale_bounds = log_scale_bounds
        self.net = MLP(in_dim, 2 * out_dim, width, depth)

    def forward(self, c: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, log_scale = self.net(c).chunk(2, dim=-1)
        if self.log_scale_bounds is not None:
            log_scale = log_scale.clamp(*self.log_scale_bounds)
        return mean, log_scale

    def rsample(self, eps: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        mean, log_scale = self(c)
        return mean + torch.exp(log_scale) * eps

    def log_prob(self, u: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        mean, log_scale = self(c)
        return gaussian_logpdf(u, mean, log_scale)

    def zero_output(self) -> None:
        zero_module(self.net.output_layer)


class ScaleShiftNet(nn.Module):
    """``u -> (s(u), t(u))`` from one MLP; with ``use_scale=False`` s is identically 0."""

    def __init__(self, d_u: int, dim: int, width: int = 10, depth: int = 2, use_scale: bool = True):
        super().__init__()
        self.dim = dim
        self.use_scale = use_scale
        self.net = MLP(d_u, (2 if use_scale else 1) * dim, width, depth)

    def forward(self, u):
        out = self.net(u)
        if self.use_scale:
            s, t = out.chunk(2, dim=-1)
            return s, t
        return torch.zeros_like(out), out

    def zero_output(self) -> None:
        zero_module(self.net.output_layer)


class IdentityShift(nn.Module):
    """``s = 0`` and ``t(u) = u``; needs ``d_u == d``."""

    def forward(self, u):
        return torch.zeros_like(u), u

    def zero_output(self) -> None:
        pass


class CifLayer(nn.Module):
    def __init__(self, f: Bijection, index_map: nn.Module, p_head: CondGaussianHead,
                 q_head: CondGaussianHead, d_u: int):
        super().__init__()
        self.f = f
        self.index_map = index_map
        self.p_head = p_head
        self.q_head = q_head
        self.d_u = d_u
        self.dim = f.dim

    def generate(self, z: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        s, t = self.index_map(u)
        return self.f.generate(torch.exp(-s) * z - t)

    def normalize(self, x: torch.Tensor, u: torch.Tensor, rng: SeededRng | None = None):
        """``(F^{-1}(x; u), log|det D F^{-1}(x; u)|)``."""
        s, t = self.index_map(u)
        w, logdet_f = self.f.normalize(x, rng)
        return torch.exp(s) * (w + t), logdet_f + s.sum(-1)

    def zero_heads(self) -> None:
        self.index_map.zero_output()
        self.p_head.zero_output()
        self.q_head.zero_output()

    def head_parameters(self):
        yield from self.index_map.parameters()
        yield from self.p_head.parameters()
        yield from self.q_head.parameters()


class DensityModel(nn.Module):
    """Common surface of the CIF stack and the exact flow baseline."""

    dim: int
    is_cif: bool

    def objective(self, x: torch.Tensor, rng: SeededRng) -> torch.Tensor:
        raise NotImplementedError

    def log_likelihood(self, x: torch.Tensor, m: int, rng: SeededRng) -> torch.Tensor:
        raise NotImplementedError

    def sample(self, n: int, rng: SeededRng) -> torch.Tensor:
        raise NotImplementedError


class Flow(DensityModel):
    """Standard Gaussian prior pushed through a composition of bijections."""

    is_cif = False

    def __init__(self, layers: Sequence[Bijection], dim: int):
        super().__init__()
        self.dim = dim
        self.bijection = Compose(list(layers), dim=dim)

    @property
    def layers(self):
        return self.bijection.layers

    def log_prob(self, x: torch.Tensor, rng: SeededRng | None = None) -> torch.Tensor:
        z = x
        delta = x.new_zeros(x.shape[0])
        for i in reversed(range(len(self.layers))):
            z, logdet = self.layers[i].normalize(z, rng.child(i).child(1) if rng is not None else None)
            delta = delta + logdet
        return check_finite(delta + standard_normal_logpdf(z), "flow log-likelihood")

    def objective(self, x, rng):
        return self.log_prob(x, rng)

    def log_likelihood(self, x, m, rng):
        return self.log_prob(x, rng)

    def sample(self, n, rng):
        return self.bijection.generate(rng.normal((n, self.dim)))


class CifStack(DensityModel):
    is_cif = True

    def __init__(self, layers: Sequence[CifLayer], dim: int):
        super().__init__()
        if any(layer.dim != dim for layer in layers):
            raise ValueError("all CIF layers must share the data dimension")
        self.dim = dim
        self.layers = nn.ModuleList(layers)

    def elbo(self, x: torch.Tensor, rng: SeededRng, trajectory: list | None = None) -> torch.Tensor:
        """Single-sample ELBO estimate per row of ``x``.

        If ``trajectory`` is a list, per-layer ``(z_l, u_l, logdet_l)`` records
        are appended to it, from the top layer down.
        """
        z = x
        delta = x.new_zeros(x.shape[0])
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            layer_rng = rng.child(i)
            eps = layer_rng.child(0).normal((x.shape[0], layer.d_u))
            u = layer.q_head.rsample(eps, z)
            z_prev, logdet = layer.normalize(z, u, layer_rng.child(1))
            log_p = layer.p_head.log_prob(u, z_prev)
            log_q = layer.q_head.log_prob(u, z)
            # p - q is grouped so zeroed heads cancel exactly
            delta = delta + (log_p - log_q) + logdet
            if trajectory is not None:
                trajectory.append((z, u, logdet))
            z = z_prev
        return check_finite(delta + standard_normal_logpdf(z), "elbo")

    def objective(self, x, rng):
        return self.elbo(x, rng)

    def log_likelihood(self, x, m, rng, max_rows: int = 16384):
        return log_likelihood_is(self, x, m, rng, max_rows)

    def sample(self, n, rng):
        z = rng.normal((n, self.dim))
        for i, layer in enumerate(self.layers):
            eps = rng.child(i).normal((n, layer.d_u))
            u = layer.p_head.rsample(eps, z)
            z = layer.generate(z, u)
        return z

    def zero_heads(self) -> None:
        for layer in self.layers:
            layer.zero_heads()

    def freeze_heads(self) -> None:
        for layer in self.layers:
            for p in layer.head_parameters():
                p.requires_grad_(False)

    def base_flow(self) -> Flow:
        """The flow obtained by dropping the index machinery (shares ``f`` modules)."""
        return Flow([layer.f for layer in self.layers], self.dim)


def log_likelihood_is(stack: CifStack, x: torch.Tensor, m: int, rng: SeededRng,
                      max_rows: int = 16384) -> torch.Tensor:
    """Importance-sampling estimate ``LogSumExp(L_1..L_m) - log m`` per row of ``x``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    n = x.shape[0]
    per_chunk = max(1, max_rows // max(n, 1))
    draws = []
    done = 0
    chunk = 0
    while done < m:
        k = min(per_chunk, m - done)
        rep = x.repeat(k, 1)
        draws.append(stack.elbo(rep, rng.child(chunk)).reshape(k, n))
        done += k
        chunk += 1
    return log_mean_exp(torch.cat(draws, dim=0), dim=0)


def make_cif_layer(f: Bijection, d_u: int, nn_f=(10, 2), nn_p=(10, 2), nn_q=(10, 2)) -> CifLayer:
    d = f.dim
    return CifLayer(
        f=f,
        index_map=ScaleShiftNet(d_u, d, *nn_f),
        p_head=CondGaussianHead(d, d_u, *nn_p),
        q_head=CondGaussianHead(d, d_u, *nn_q, log_scale_bounds=Q_LOG_SCALE_BOUNDS),
        d_u=d_u,
    )


def make_cif_id_layer(d: int, d_u: int, variant: int, nn_f=(10, 2), nn_p=(10, 2), nn_q=(10, 2)) -> CifLayer:
    """Identity-``f`` CIF layer. 1: s = 0, t(u) = u; 2: s = 0, t = NN; 3: (s, t) = NN."""
    from .bijections import Identity

    if variant == 1:
        if d_u != d:
            raise ValueError("CIF-Id variant 1 needs d_u == d")
        index_map = IdentityShift()
    elif variant == 2:
        index_map = ScaleShiftNet(d_u, d, *nn_f, use_scale=False)
    elif variant == 3:
        index_map = ScaleShiftNet(d_u, d, *nn_f, use_scale=True)
    else:
        raise ValueError(f"unknown CIF-Id variant {variant}")
    return CifLayer(
        f=Identity(d),
        index_map=index_map,
        p_head=CondGaussianHead(d, d_u, *nn_p),
        q_head=CondGaussianHead(d, d_u, *nn_q, log_scale_bounds=Q_LOG_SCALE_BOUNDS),
        d_u=d_u,
    )


def default_index_dim(d: int) -> int:
    return max(1, math.ceil(d / 4))
