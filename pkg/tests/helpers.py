"""Shared builders for tests: randomised layers and closed-form maps."""
import math

import numpy as np
import torch
from torch import nn

from cifkit.bijections import ActNorm, AffineCoupling, Compose, MaskedAutoregressive, ResidualBlock
from cifkit.cif import CifStack, make_cif_layer
from cifkit.models import coupling_mask
from cifkit.numcore import SeededRng, seeded_torch

LAYER_KINDS = ("coupling", "maf", "actnorm", "resflow", "compose")


@torch.no_grad()
def randomize(module: nn.Module, rng: SeededRng, scale: float = 0.3) -> nn.Module:
    """Perturb every parameter so zero-initialised outputs become non-trivial."""
    for i, p in enumerate(module.parameters()):
        p.add_(scale * rng.child(i).normal(p.shape))
    return module


class ScalarG(nn.Module):
    """g(x) = c * x, a closed-form contraction for residual-block tests."""

    def __init__(self, c: float):
        super().__init__()
        self.c = c

    def forward(self, x):
        return self.c * x


def linear_block(c: float, dim: int = 1, **kwargs) -> ResidualBlock:
    block = ResidualBlock(dim, width=4, depth=1, **kwargs)
    block.g = ScalarG(c)
    return block


def make_layer(kind: str, dim: int, seed: int):
    rng = SeededRng(seed)
    with seeded_torch(rng.child(0)):
        if kind == "coupling":
            layer = AffineCoupling(dim, coupling_mask(dim, seed % 2 == 1), width=16, depth=2)
        elif kind == "maf":
            layer = MaskedAutoregressive(dim, width=16, depth=2, reverse=seed % 2 == 1)
        elif kind == "actnorm":
            layer = ActNorm.from_params(rng.child(2).normal((dim,)), 0.5 * rng.child(3).normal((dim,)))
        elif kind == "resflow":
            layer = ResidualBlock(dim, width=16, depth=2, kappa=0.9)
        elif kind == "compose":
            layer = Compose([make_layer("coupling", dim, seed + 1), make_layer("resflow", dim, seed + 2),
                             make_layer("maf", dim, seed + 3)])
            return layer.eval()
        else:
            raise ValueError(kind)
    if kind in ("coupling", "maf"):
        randomize(layer, rng.child(1))
    return layer.eval()


def random_cif_stack(dim: int, n_layers: int, d_u: int, seed: int, base: str = "coupling") -> CifStack:
    rng = SeededRng(seed)
    layers = []
    for i in range(n_layers):
        f = make_layer(base, dim, seed * 100 + i) if dim > 1 or base != "coupling" else make_layer("actnorm", dim, i)
        with seeded_torch(rng.child(i)):
            layer = make_cif_layer(f, d_u)
        randomize(layer.index_map, rng.child(100 + i))
        randomize(layer.p_head, rng.child(200 + i))
        randomize(layer.q_head, rng.child(300 + i))
        layers.append(layer)
    return CifStack(layers, dim).eval()


def joint_log_density(layer, x: float, u: float) -> float:
    """log p(x, u) for a one-layer, one-dimensional CIF with standard-normal prior."""
    xt = torch.tensor([[x]])
    ut = torch.tensor([[u]])
    with torch.no_grad():
        z, logdet = layer.normalize(xt, ut)
        log_p_u = layer.p_head.log_prob(ut, z)
    return float(-0.5 * z**2 - 0.5 * math.log(2 * math.pi) + logdet + log_p_u)


def quadrature_log_px(layer, x: float) -> float:
    """log p_X(x) by adaptive quadrature of the joint density over the index.

    The integrand is rescaled by its peak on a coarse grid, and the real line
    is split around the peak so ``quad`` does not miss a narrow mode.
    """
    from scipy import integrate

    peak, centre = max((joint_log_density(layer, x, u), u) for u in np.linspace(-30, 30, 601))

    def integrand(u):
        return math.exp(joint_log_density(layer, x, u) - peak)

    total = 0.0
    for lo, hi in ((-np.inf, centre - 10), (centre - 10, centre), (centre, centre + 10), (centre + 10, np.inf)):
        total += integrate.quad(integrand, lo, hi, epsabs=1e-14, epsrel=1e-10, limit=500)[0]
    return peak + math.log(total)


def random_cif_1d(seed: int, scale: float = 0.2, q_widen: float = 0.5) -> CifStack:
    """One-layer d = d_u = 1 CIF; f alternates between affine and residual.

    The q head's log-scale is offset by ``q_widen`` so importance weights have
    finite variance and m = 1e5 draws resolve the marginal.
    """
    rng = SeededRng(seed, (1,))
    with seeded_torch(rng.child(0)):
        if seed % 2:
            f = ResidualBlock(1, width=8, depth=2, kappa=0.9).eval()
        else:
            f = ActNorm.from_params(rng.child(1).normal((1,)), 0.5 * rng.child(2).normal((1,)))
        layer = make_cif_layer(f, 1)
    for k, head in enumerate((layer.index_map, layer.p_head, layer.q_head)):
        randomize(head, rng.child(10 + k), scale)
    with torch.no_grad():
        layer.q_head.net.output_layer.bias[1] += q_widen
    return CifStack([layer], 1).eval()
