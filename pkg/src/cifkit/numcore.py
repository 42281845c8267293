"""Numeric substrate: float64 torch tensors, seeded RNG streams and small primitives.

Tensors are plain ``torch.Tensor`` objects in float64; the gradient tape is
torch autograd. The helpers here add the shape discipline, finite checks and
test oracles the rest of the package relies on.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import torch

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)

torch.set_default_dtype(DTYPE)

_STRICT = False


class NonFiniteError(FloatingPointError):
    """Raised in strict mode when a NaN or Inf reaches an op boundary."""


def set_strict(flag: bool) -> None:
    global _STRICT
    _STRICT = bool(flag)


def is_strict() -> bool:
    return _STRICT


@contextlib.contextmanager
def strict(flag: bool = True) -> Iterator[None]:
    previous = _STRICT
    set_strict(flag)
    try:
        yield
    finally:
        set_strict(previous)


def check_finite(t: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if _STRICT and not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"non-finite values in {where}")
    return t


def as_tensor(data, shape: Sequence[int] | None = None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE)
    if shape is not None:
        t = t.reshape(tuple(shape))
    return check_finite(t, "as_tensor")


# ---------------------------------------------------------------------------
# Seeded random streams


@dataclass
class SeededRng:
    """Deterministic random stream identified by ``(seed, stream_id)``.

    Child streams come from ``numpy.random.SeedSequence`` spawn keys, so
    ``split`` is reproducible and children are statistically independent.
    """

    seed: int
    stream_id: tuple[int, ...] = ()
    _generator: torch.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if isinstance(self.stream_id, int):
            self.stream_id = (self.stream_id,)
        self.stream_id = tuple(int(s) for s in self.stream_id)
        seq = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.stream_id)
        state = seq.generate_state(2, dtype=np.uint32)
        self._generator = torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))

    def child(self, key: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream_id + (int(key),))

    def split(self, n: int) -> list["SeededRng"]:
        return [self.child(i) for i in range(n)]

    @property
    def generator(self) -> torch.Generator:
        return self._generator

    def normal(self, shape: Sequence[int]) -> torch.Tensor:
        return torch.randn(tuple(shape), generator=self._generator, dtype=DTYPE)

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> torch.Tensor:
        u = torch.rand(tuple(shape), generator=self._generator, dtype=DTYPE)
        return low + (high - low) * u

    def geometric(self, p: float, size: int = 1) -> torch.Tensor:
        """Draws on {1, 2, ...} with P(N >= k) = (1 - p)^(k - 1)."""
        return torch.empty(size, dtype=DTYPE).geometric_(p, generator=self._generator).long()

    def permutation(self, n: int) -> torch.Tensor:
        return torch.randperm(n, generator=self._generator)

    def integers(self, high: int, size: int) -> torch.Tensor:
        return torch.randint(high, (size,), generator=self._generator)

    def torch_seed(self) -> int:
        return int(torch.randint(0, 2**62, (1,), generator=self._generator))


@contextlib.contextmanager
def seeded_torch(rng: SeededRng) -> Iterator[None]:
    """Run a block (e.g. ``nn.Linear`` construction) under torch's global RNG seeded from ``rng``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.torch_seed())
        yield


def sample_standard_normal(rng: SeededRng, shape: Sequence[int]) -> torch.Tensor:
    return rng.normal(shape)


# ---------------------------------------------------------------------------
# Differentiable ops


def _check_broadcast(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.dim() == 0 or b.dim() == 0:
        return
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ValueError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return check_finite(a @ b, "matmul")


_UNARY = {"exp": torch.exp, "neg": torch.neg}
_BINARY = {"add": torch.add, "sub": torch.sub, "mul": torch.mul}


def elementwise(op: str, *args) -> torch.Tensor:
    """Pointwise ``add|sub|mul|exp|log|neg|scale``; only scalar or equal-shape broadcasting."""
    tensors = [a if isinstance(a, torch.Tensor) else torch.as_tensor(a, dtype=DTYPE) for a in args]
    if op in _UNARY:
        (x,) = tensors
        out = _UNARY[op](x)
    elif op == "log":
        (x,) = tensors
        if bool((x <= 0).any()):
            raise ValueError("log of non-positive input")
        out = torch.log(x)
    elif op in _BINARY:
        a, b = tensors
        _check_broadcast(a, b)
        out = _BINARY[op](a, b)
    elif op == "scale":
        x, c = tensors
        if c.dim() != 0:
            raise ValueError("scale factor must be a scalar")
        out = x * c
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return check_finite(out, op)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def lipswish(x: torch.Tensor) -> torch.Tensor:
    # swish has max slope ~1.0998, so dividing by 1.1 keeps it 1-Lipschitz
    return x * torch.sigmoid(x) / 1.1


def gaussian_logpdf(x: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian log density summed over the last axis."""
    std_resid = (x - mean) * torch.exp(-log_std)
    return (-log_std - 0.5 * LOG_2PI - 0.5 * std_resid**2).sum(-1)


def standard_normal_logpdf(x: torch.Tensor) -> torch.Tensor:
    return (-0.5 * LOG_2PI - 0.5 * x**2).sum(-1)


def log_mean_exp(values: torch.Tensor, dim: int = 0) -> torch.Tensor:
    m = values.shape[dim]
    return torch.logsumexp(values, dim=dim) - math.log(m)


def param_store(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Named trainable parameters in registration order."""
    return {name: p for name, p in module.named_parameters() if p.requires_grad}


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every parameter leaf.

    Unused parameters get zero gradients. Calling twice on the same graph
    raises torch's "backward through the graph a second time" error.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, grads)
    }


# ---------------------------------------------------------------------------
# Spectral normalisation


@dataclass
class PowerIterState:
    """Warm-started left/right singular vector estimates for one weight."""

    u: torch.Tensor
    v: torch.Tensor
    sigma: float = 0.0
    iterations: int = 0

    @classmethod
    def init(cls, shape: tuple[int, int], rng: SeededRng | None = None) -> "PowerIterState":
        rng = rng or SeededRng(0)
        u = rng.normal((shape[0],))
        v = rng.normal((shape[1],))
        return cls(u / u.norm(), v / v.norm())


def power_iteration(w: torch.Tensor, state: PowerIterState, tol: float, max_iter: int = 200) -> float:
    """Refine ``state`` in place until successive sigma estimates differ by < tol.

    The estimate stored from the previous call counts as the predecessor of
    the first new one, so a converged warm start costs a single iteration.
    """
    with torch.no_grad():
        u, v = state.u, state.v
        prev = state.sigma if state.sigma > 0 else None
        sigma = 0.0
        it = 0
        for it in range(1, max_iter + 1):
            v = w.t() @ u
            vn = v.norm()
            if vn == 0:
                state.sigma, state.iterations = 0.0, it
                return 0.0
            v = v / vn
            u = w @ v
            un = u.norm()
            if un == 0:
                state.sigma, state.iterations = 0.0, it
                return 0.0
            u = u / un
            sigma = float(u @ w @ v)
            if prev is not None and abs(sigma - prev) < tol:
                break
            prev = sigma
        state.u, state.v = u, v
        state.sigma, state.iterations = sigma, it
    return sigma


def spectral_norm_normalize(
    w: torch.Tensor, kappa: float, state: PowerIterState, tol: float = 1e-3, max_iter: int = 200
) -> torch.Tensor:
    """Return ``w * min(1, kappa / sigma_hat(w))``; differentiable in ``w`` through sigma_hat."""
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if power_iteration(w.detach(), state, tol, max_iter) <= 0.0:
        return w
    sigma = state.u @ w @ state.v
    factor = torch.clamp(sigma / kappa, min=1.0)
    return w / factor


# ---------------------------------------------------------------------------
# Determinants and finite differences


class LogAbsDet(NamedTuple):
    value: torch.Tensor
    singular: torch.Tensor


def lu_log_abs_det(a: torch.Tensor) -> LogAbsDet:
    """log|det a| via pivoted LU; singular matrices give ``-inf`` and ``singular=True``."""
    if a.dim() < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"square matrix required, got {tuple(a.shape)}")
    sign, logabs = torch.linalg.slogdet(a)
    singular = sign == 0
    logabs = torch.where(singular, torch.full_like(logabs, -math.inf), logabs)
    return LogAbsDet(logabs, singular)


def finite_diff_jacobian(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-5
) -> torch.Tensor:
    """Central-difference Jacobian of a vector function at a single point ``x``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = x.detach().to(DTYPE).reshape(-1)
    cols = []
    with torch.no_grad():
        for i in range(x.numel()):
            e = torch.zeros_like(x)
            e[i] = step
            cols.append((f(x + e).reshape(-1) - f(x - e).reshape(-1)) / (2.0 * step))
    return torch.stack(cols, dim=1)
