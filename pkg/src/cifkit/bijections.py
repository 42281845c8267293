"""Flow layers.

Every layer maps batches of row vectors ``(B, d)``. ``generate`` is the
sampling direction z -> x; ``normalize`` is x -> z and also returns
``log|det D f^{-1}(x)|`` per row.
"""
from __future__ import annotations

import contextlib
import math
import warnings
from dataclasses import dataclass
from typing import Iterator, Sequence

import torch
from torch import nn

from .nets import MADE, MLP, ResidualNet
from .numcore import SeededRng, check_finite, lu_log_abs_det

EXACT_LOGDET_MAX_DIM = 64


class InversionError(RuntimeError):
    """Fixed-point inversion did not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class Bijection(nn.Module):
    dim: int

    def generate(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def normalize(self, x: torch.Tensor, rng: SeededRng | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def params(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())


class Identity(Bijection):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def generate(self, z):
        return z

    def normalize(self, x, rng=None):
        return x, x.new_zeros(x.shape[0])


class Compose(Bijection):
    """``f = f_L o ... o f_1``: generate runs layers in order, normalize in reverse."""

    def __init__(self, layers: Sequence[Bijection], dim: int | None = None):
        super().__init__()
        dims = {layer.dim for layer in layers}
        if dim is not None:
            dims.add(dim)
        if len(dims) > 1:
            raise ValueError(f"layers disagree on dimension: {sorted(dims)}")
        if not dims:
            raise ValueError("empty composition needs an explicit dim")
        self.dim = dims.pop()
        self.layers = nn.ModuleList(layers)

    def generate(self, z):
        for layer in self.layers:
            z = layer.generate(z)
        return z

    def normalize(self, x, rng=None):
        logdet = x.new_zeros(x.shape[0])
        for i, layer in reversed(list(enumerate(self.layers))):
            x, ld = layer.normalize(x, rng.child(i) if rng is not None else None)
            logdet = logdet + ld
        return x, logdet


class AffineCoupling(Bijection):
    """RealNVP coupling; ``mask == 1`` marks the coordinates passed through unchanged."""

    def __init__(self, dim: int, mask: Sequence[int], width: int = 64, depth: int = 2):
        super().__init__()
        mask_t = torch.as_tensor(mask, dtype=torch.get_default_dtype())
        if mask_t.shape != (dim,) or not (0 < float(mask_t.sum()) < dim):
            raise ValueError("mask needs at least one 0 and one 1")
        self.dim = dim
        self.register_buffer("mask", mask_t)
        self.coupler = MLP(dim, 2 * dim, width, depth)

    def _scale_shift(self, masked: torch.Tensor):
        log_scale, shift = self.coupler(masked).chunk(2, dim=-1)
        active = 1.0 - self.mask
        return log_scale * active, shift * active

    def generate(self, z):
        log_scale, shift = self._scale_shift(z * self.mask)
        return z * self.mask + (1.0 - self.mask) * (z * torch.exp(log_scale) + shift)

    def normalize(self, x, rng=None):
        log_scale, shift = self._scale_shift(x * self.mask)
        z = x * self.mask + (1.0 - self.mask) * ((x - shift) * torch.exp(-log_scale))
        return z, -log_scale.sum(-1)


class MaskedAutoregressive(Bijection):
    """MAF layer: ``z_i = (x_i - mu_i(x_<i)) * exp(-alpha_i(x_<i))`` under ``order``."""

    def __init__(self, dim: int, width: int = 64, depth: int = 2, reverse: bool = False):
        super().__init__()
        self.dim = dim
        order = list(range(dim))[::-1] if reverse else list(range(dim))
        self.order = order
        self.made = MADE(dim, width, depth, order, n_params=2)

    def normalize(self, x, rng=None):
        mu, alpha = self.made(x)
        return (x - mu) * torch.exp(-alpha), -alpha.sum(-1)

    def generate(self, z):
        x = torch.zeros_like(z)
        for i in sorted(range(self.dim), key=lambda j: self.order[j]):
            mu, alpha = self.made(x)
            x = x.clone()
            x[:, i] = z[:, i] * torch.exp(alpha[:, i]) + mu[:, i]
        return x


_ACTNORM_INIT = False


@contextlib.contextmanager
def actnorm_init_mode() -> Iterator[None]:
    """Within this block, uninitialised ActNorm layers initialise from the batch they see."""
    global _ACTNORM_INIT
    previous, _ACTNORM_INIT = _ACTNORM_INIT, True
    try:
        yield
    finally:
        _ACTNORM_INIT = previous


class ActNorm(Bijection):
    """Per-dimension affine map ``z = (x - shift) * exp(log_scale)`` with data-dependent init."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.shift = nn.Parameter(torch.zeros(dim))
        self.log_scale = nn.Parameter(torch.zeros(dim))
        self.register_buffer("initialized", torch.tensor(False))

    @classmethod
    def from_params(cls, shift, log_scale) -> "ActNorm":
        shift = torch.as_tensor(shift, dtype=torch.get_default_dtype()).reshape(-1)
        layer = cls(shift.numel())
        with torch.no_grad():
            layer.shift.copy_(shift)
            layer.log_scale.copy_(torch.as_tensor(log_scale, dtype=shift.dtype).expand_as(shift))
        layer.initialized.fill_(True)
        return layer

    @torch.no_grad()
    def initialize(self, batch: torch.Tensor) -> None:
        if batch.shape[0] < 2:
            raise ValueError("ActNorm initialisation needs at least 2 points")
        mean = batch.mean(0)
        std = batch.std(0, unbiased=False)
        if bool((std < 1e-6).any()):
            warnings.warn("ActNorm: zero batch std clamped at 1e-6", RuntimeWarning, stacklevel=2)
            std = std.clamp(min=1e-6)
        self.shift.copy_(mean)
        self.log_scale.copy_(-torch.log(std))
        self.initialized.fill_(True)

    def _require_init(self, x):
        if not bool(self.initialized):
            if _ACTNORM_INIT:
                self.initialize(x.detach())
            else:
                raise RuntimeError("ActNorm applied before initialisation")

    def normalize(self, x, rng=None):
        self._require_init(x)
        z = (x - self.shift) * torch.exp(self.log_scale)
        return z, self.log_scale.sum().expand(x.shape[0])

    def generate(self, z):
        if not bool(self.initialized):
            raise RuntimeError("ActNorm applied before initialisation")
        return z * torch.exp(-self.log_scale) + self.shift


@dataclass(frozen=True)
class LogDetConfig:
    """How a residual block estimates ``log det(I + Dg)``.

    mode: ``exact`` (dense Jacobian + LU), ``truncated`` (first ``k`` series
    terms) or ``roulette`` (``k_exact_*`` exact terms plus a Russian-roulette
    tail with ``N ~ Geom(p)``). ``hutchinson`` swaps exact traces for a single
    shared Gaussian probe.
    """

    mode: str = "exact"
    k: int = 10
    p: float = 0.5
    k_exact_train: int = 2
    k_exact_test: int = 20
    hutchinson: bool = False

    def __post_init__(self):
        if self.mode not in ("exact", "truncated", "roulette"):
            raise ValueError(f"unknown logdet mode {self.mode!r}")
        if not 0.0 < self.p < 1.0:
            raise ValueError("roulette p must lie in (0, 1)")
        if self.k < 1 or self.k_exact_train < 0 or self.k_exact_test < 0:
            raise ValueError("series term counts must be non-negative (k >= 1)")


def series_coefficients(n: int) -> list[float]:
    return [(-1.0) ** (j + 1) / j for j in range(1, n + 1)]


class ResidualBlock(Bijection):
    """Residual flow step with ``f^{-1}(x) = x + g(x)`` and ``Lip g <= kappa``."""

    def __init__(self, dim: int, width: int = 128, depth: int = 4, kappa: float = 0.9,
                 logdet: LogDetConfig | None = None, sn_tol: float = 1e-3,
                 inverse_tol: float = 1e-8, inverse_max_iter: int = 1000):
        super().__init__()
        if not 0.0 < kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")
        self.dim = dim
        self.kappa = kappa
        self.logdet_config = logdet or LogDetConfig()
        self.inverse_tol = inverse_tol
        self.inverse_max_iter = inverse_max_iter
        self.g = ResidualNet(dim, width, depth, kappa, sn_tol)

    # -- log-determinant estimators ------------------------------------------------

    def _with_input_grad(self, x):
        if x.requires_grad:
            return x
        return x.detach().requires_grad_(True)

    def jacobian(self, x: torch.Tensor, create_graph: bool | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(g(x), Dg(x))`` with the Jacobian built from ``d`` reverse passes."""
        if create_graph is None:
            create_graph = torch.is_grad_enabled()
        with torch.enable_grad():
            xg = self._with_input_grad(x)
            gx = self.g(xg)
            rows = []
            for i in range(self.dim):
                (row,) = torch.autograd.grad(gx[:, i].sum(), xg, create_graph=create_graph,
                                             retain_graph=True)
                rows.append(row)
            jac = torch.stack(rows, dim=1)
        if not create_graph:
            gx, jac = gx.detach(), jac.detach()
        return gx, jac

    def logdet_exact(self, x):
        if self.dim > EXACT_LOGDET_MAX_DIM:
            raise ValueError(f"exact log-det refused for d={self.dim} > {EXACT_LOGDET_MAX_DIM}")
        gx, jac = self.jacobian(x)
        eye = torch.eye(self.dim, dtype=x.dtype)
        return gx, lu_log_abs_det(eye + jac).value

    def _trace_terms(self, x, n_terms: int, hutchinson: bool, rng: SeededRng | None):
        """``(g(x), [tr Dg^j]_{j=1..n})`` with exact or single-probe Hutchinson traces."""
        if not hutchinson:
            gx, jac = self.jacobian(x)
            traces = []
            power = jac
            for j in range(n_terms):
                if j:
                    power = power @ jac
                traces.append(torch.diagonal(power, dim1=-2, dim2=-1).sum(-1))
            return gx, traces
        if rng is None:
            raise ValueError("Hutchinson traces need an rng")
        create_graph = torch.is_grad_enabled()
        with torch.enable_grad():
            xg = self._with_input_grad(x)
            gx = self.g(xg)
            v = rng.normal(x.shape)
            w = v
            traces = []
            for _ in range(n_terms):
                (w,) = torch.autograd.grad(gx, xg, grad_outputs=w, create_graph=create_graph,
                                           retain_graph=True)
                traces.append((w * v).sum(-1))
        if not create_graph:
            gx = gx.detach()
            traces = [t.detach() for t in traces]
        return gx, traces

    def logdet_truncated(self, x, k: int, hutchinson: bool = False, rng: SeededRng | None = None):
        gx, traces = self._trace_terms(x, k, hutchinson, rng)
        logdet = sum(c * t for c, t in zip(series_coefficients(k), traces))
        return gx, logdet

    def logdet_roulette(self, x, rng: SeededRng, p: float, k_exact: int, hutchinson: bool = False,
                        n_tail: torch.Tensor | int | None = None):
        """Unbiased estimate: ``k_exact`` series terms plus a roulette-weighted tail.

        Each row draws its own ``N ~ Geom(p)`` on {1, 2, ...} unless ``n_tail``
        forces the tail length (0 disables the tail).
        """
        batch = x.shape[0]
        if n_tail is None:
            n_tail = rng.child(0).geometric(p, batch)
        elif isinstance(n_tail, int):
            n_tail = torch.full((batch,), n_tail, dtype=torch.long)
        n_max = int(n_tail.max()) if batch else 0
        gx, traces = self._trace_terms(x, k_exact + n_max, hutchinson, rng.child(1) if hutchinson else None)
        coeffs = series_coefficients(k_exact + n_max)
        logdet = x.new_zeros(batch)
        for j in range(k_exact):
            logdet = logdet + coeffs[j] * traces[j]
        for i in range(1, n_max + 1):
            survive = (1.0 - p) ** (i - 1)
            keep = (n_tail >= i).to(x.dtype)
            logdet = logdet + keep * coeffs[k_exact + i - 1] * traces[k_exact + i - 1] / survive
        return gx, logdet

    def logdet(self, x, rng: SeededRng | None = None):
        cfg = self.logdet_config
        if cfg.mode == "exact":
            return self.logdet_exact(x)
        if cfg.mode == "truncated":
            return self.logdet_truncated(x, cfg.k, cfg.hutchinson, rng)
        if rng is None:
            raise ValueError("roulette log-det needs an rng")
        k_exact = cfg.k_exact_train if self.training else cfg.k_exact_test
        return self.logdet_roulette(x, rng, cfg.p, k_exact, cfg.hutchinson)

    # -- directions -------------------------------------------------------------------

    def normalize(self, x, rng=None):
        gx, logdet = self.logdet(x, rng)
        return check_finite(x + gx, "residual block"), logdet

    def generate(self, z, tol: float | None = None, max_iter: int | None = None):
        tol = self.inverse_tol if tol is None else tol
        max_iter = self.inverse_max_iter if max_iter is None else max_iter
        if tol <= 0:
            raise ValueError("tol must be positive")
        with torch.no_grad():
            z = z.detach()
            x = z
            residual = math.inf
            for _ in range(max_iter):
                x_next = z - self.g(x)
                residual = float((x_next - x).abs().max()) if x.numel() else 0.0
                x = x_next
                if residual < tol:
                    return x
        raise InversionError("fixed-point inversion exceeded max_iter", residual)


def residual_blocks(module: nn.Module) -> list[ResidualBlock]:
    return [m for m in module.modules() if isinstance(m, ResidualBlock)]
