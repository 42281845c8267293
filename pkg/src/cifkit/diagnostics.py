"""Empirical checks of invertibility, Lipschitz budgets and Russian-roulette variance."""
from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .bijections import Bijection, InversionError, ResidualBlock, residual_blocks
from .cif import CifStack, DensityModel, Flow
from .numcore import SeededRng

Sampler = Callable[[int, SeededRng], torch.Tensor]


# ---------------------------------------------------------------------------
# Bi-Lipschitz estimation


@dataclass
class BiLipReport:
    """Lower bounds on ``Lip(generate)``, ``Lip(normalize)`` and their max (>= 1).

    All three are maxima of observed distance ratios, so they can only
    under-estimate the true constants.
    """

    forward_lip_lb: float
    inverse_lip_lb: float
    bilip_lb: float
    pairs_evaluated: int
    theoretical_bound: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _ratios(num_a, num_b, den_a, den_b) -> torch.Tensor:
    num = (num_a - num_b).norm(dim=-1)
    den = (den_a - den_b).norm(dim=-1)
    keep = den > 0
    return num[keep] / den[keep]


def _normalize_only(bijection: Bijection, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return bijection.normalize(x)[0]


def empirical_bilip(bijection: Bijection, sampler: Sampler, n_points: int, n_pairs: int, rng: SeededRng,
                    theoretical_bound: float | None = None, scales: Sequence[float] = (1e-3, 1e-1)) -> BiLipReport:
    """Max pairwise distance ratios over random global pairs and local perturbations.

    ``sampler`` draws points in data space; latent points are their images
    under ``normalize``. Coincident pairs are skipped.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    x = sampler(n_points, rng.child(0))
    z = _normalize_only(bijection, x)
    idx = rng.child(1).integers(n_points, 2 * n_pairs).reshape(2, n_pairs)
    fwd = [_ratios(x[idx[0]], x[idx[1]], z[idx[0]], z[idx[1]])]
    inv = [_ratios(z[idx[0]], z[idx[1]], x[idx[0]], x[idx[1]])]
    for k, scale in enumerate(scales):
        dirs = rng.child(2 + k).normal(x.shape)
        dirs = dirs / dirs.norm(dim=-1, keepdim=True)
        x_near = x + scale * dirs
        z_near = z + scale * dirs
        with torch.no_grad():
            inv.append(_ratios(_normalize_only(bijection, x_near), z, x_near, x))
            fwd.append(_ratios(bijection.generate(z_near), x, z_near, z))
    fwd_t, inv_t = torch.cat(fwd), torch.cat(inv)
    forward_lb = float(fwd_t.max()) if fwd_t.numel() else 0.0
    inverse_lb = float(inv_t.max()) if inv_t.numel() else 0.0
    return BiLipReport(forward_lb, inverse_lb, max(1.0, forward_lb, inverse_lb),
                       int(fwd_t.numel() + inv_t.numel()), theoretical_bound)


def resflow_bilip_bound(kappa: float, n_layers: int) -> float:
    return max(1.0 + kappa, 1.0 / (1.0 - kappa)) ** n_layers


def lipschitz_audit(block: ResidualBlock, rng: SeededRng, n_pairs: int = 10000, spread: float = 3.0) -> float:
    """Largest ``|g(a) - g(b)| / |a - b|`` over global and near-coincident pairs."""
    d = block.dim
    half = n_pairs // 2
    a = spread * rng.child(0).normal((n_pairs, d))
    b_far = spread * rng.child(1).normal((half, d))
    step = torch.exp(rng.child(2).uniform((n_pairs - half, 1), math.log(1e-4), math.log(1.0)))
    dirs = rng.child(3).normal((n_pairs - half, d))
    b_near = a[half:] + step * dirs / dirs.norm(dim=-1, keepdim=True)
    b = torch.cat([b_far, b_near])
    with torch.no_grad():
        ga, gb = block.g(a), block.g(b)
    return float(_ratios(ga, gb, a, b).max())


def flow_bijection(model: DensityModel) -> Bijection:
    if isinstance(model, Flow):
        return model.bijection
    if isinstance(model, CifStack):
        return model.base_flow().bijection
    if isinstance(model, Bijection):
        return model
    raise TypeError(f"no bijection for {type(model).__name__}")


def bilip_growth_curve(configs, data, rng: SeededRng, n_points: int = 2000, n_pairs: int = 10000,
                       m_test: int | None = None) -> list[dict]:
    """Train each config and report ``(test_ll, bilip_lb)`` for its flow."""
    from .training import evaluate, train

    rows = []
    for i, cfg in enumerate(configs):
        result = train(cfg, data)
        model = result.model
        test = evaluate(model, data.test, m_test or cfg.eval.m_test, SeededRng(cfg.eval.eval_seed).child(1))

        def sampler(n, r, x=data.test):
            return x[r.integers(x.shape[0], n)]

        report = empirical_bilip(flow_bijection(model), sampler, n_points, n_pairs, rng.child(i))
        rows.append({"type": cfg.model.type, "layers": cfg.model.layers, "seed": cfg.seed,
                     "test_ll": test.mean_ll, "test_stderr": test.stderr, "bilip_lb": report.bilip_lb})
    return rows


# ---------------------------------------------------------------------------
# Density grids


@dataclass
class DensityGrid:
    x1: np.ndarray
    x2: np.ndarray
    log_density: np.ndarray

    def integral(self) -> float:
        """Trapezoid integral of ``exp(log_density)`` over the grid."""
        dens = np.exp(self.log_density)
        return float(np.trapezoid(np.trapezoid(dens, self.x2, axis=1), self.x1))

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x1", "x2", "log_density"])
            for i, a in enumerate(self.x1):
                for j, b in enumerate(self.x2):
                    writer.writerow([repr(float(a)), repr(float(b)), repr(float(self.log_density[i, j]))])


def density_grid(model: DensityModel, bounds: Sequence[float], resolution: int, m: int, rng: SeededRng,
                 batch_size: int = 1000) -> DensityGrid:
    """Log-density estimates on a regular grid; ``bounds = (x1_lo, x1_hi, x2_lo, x2_hi)``."""
    from .training import evaluate

    if model.dim != 2:
        raise ValueError(f"density grids need d = 2, model has d = {model.dim}")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    x1 = np.linspace(bounds[0], bounds[1], resolution)
    x2 = np.linspace(bounds[2], bounds[3], resolution)
    mesh = np.stack(np.meshgrid(x1, x2, indexing="ij"), axis=-1).reshape(-1, 2)
    values = evaluate(model, torch.as_tensor(mesh), m, rng, batch_size).values
    return DensityGrid(x1, x2, values.numpy().reshape(resolution, resolution))


# ---------------------------------------------------------------------------
# Reconstruction


@dataclass
class ReconstructionReport:
    max_error: float
    mean_error: float
    n: int
    failures: int

    def as_dict(self) -> dict:
        return asdict(self)


@contextlib.contextmanager
def inversion_tolerance(model, tol: float | None) -> Iterator[None]:
    blocks = residual_blocks(model)
    saved = [b.inverse_tol for b in blocks]
    try:
        if tol is not None:
            for b in blocks:
                b.inverse_tol = tol
        yield
    finally:
        for b, t in zip(blocks, saved):
            b.inverse_tol = t


def _round_trip(model: DensityModel, x: torch.Tensor, rng: SeededRng) -> torch.Tensor:
    with torch.no_grad():
        if isinstance(model, Flow):
            return model.bijection.generate(model.bijection.normalize(x)[0])
        indices = []
        z = x
        for i in reversed(range(len(model.layers))):
            layer = model.layers[i]
            u = layer.q_head.rsample(rng.child(i).normal((x.shape[0], layer.d_u)), z)
            indices.append(u)
            z, _ = layer.normalize(z, u)
        for layer, u in zip(model.layers, reversed(indices)):
            z = layer.generate(z, u)
        return z


def reconstruction_audit(model: DensityModel, data: torch.Tensor, rng: SeededRng, tol: float | None = None,
                         batch_size: int = 1000) -> ReconstructionReport:
    """Sup-norm errors of ``generate(normalize(x))`` with indices held fixed between passes.

    Points whose fixed-point inversion fails are counted, not raised.
    """
    errors = []
    failures = 0
    with inversion_tolerance(model, tol):
        for b, lo in enumerate(range(0, data.shape[0], batch_size)):
            x = data[lo:lo + batch_size]
            try:
                errors.append((_round_trip(model, x, rng.child(b)) - x).abs().amax(-1))
            except InversionError:
                for k in range(x.shape[0]):
                    try:
                        xk = x[k:k + 1]
                        errors.append((_round_trip(model, xk, rng.child(b)) - xk).abs().amax(-1))
                    except InversionError:
                        failures += 1
    err = torch.cat(errors) if errors else torch.zeros(0)
    return ReconstructionReport(float(err.max()) if err.numel() else math.nan,
                                float(err.mean()) if err.numel() else math.nan,
                                int(data.shape[0]), failures)


# ---------------------------------------------------------------------------
# Russian roulette series (1-D, g' == -kappa)


def roulette_alpha(kappa: float, j: int) -> float:
    """Series term ``(-1)^{j+1} (g')^j / j`` at ``g' = -kappa``, i.e. ``-kappa^j / j``."""
    return -(kappa**j) / j


def survival(p: float, j: int) -> float:
    """``P(N >= j)`` for ``N ~ Geom(p)`` on {1, 2, ...}."""
    return (1.0 - p) ** (j - 1)


def limit_sum_ratio(b: float, n: int) -> float:
    """``n / b^n * sum_{j<n} b^j / j``; tends to ``1 / (b - 1)`` when ``|b| > 1``."""
    return sum(n * b ** (j - n) / j for j in range(1, n))


@dataclass
class RouletteVarianceReport:
    kappa: float
    p: float
    partial_sums: list[float]
    mean_partial_sums: list[float]
    verdict: str
    predicted: str
    threshold: float
    predicted_growth_rate: float
    observed_growth_rate: float | None
    terms_evaluated: int
    notes: str = field(default="")

    def as_dict(self) -> dict:
        return asdict(self)


def rr_variance_lower_bound(kappa: float, p: float, n_terms: int, threshold: float = 1e6,
                            term_tol: float = 1e-12) -> RouletteVarianceReport:
    """Partial sums of ``2 sum_{j>=2} alpha_j S_{j-1}``, the variance lower-bound series.

    Verdict is ``diverges`` once a partial sum exceeds ``threshold``,
    ``converges`` once a term falls below ``term_tol`` in magnitude, otherwise
    ``undetermined``. The prediction is the sign test ``kappa^2`` vs ``1 - p``.
    """
    if not (0 < kappa < 1 and 0 < p < 1):
        raise ValueError("kappa and p must lie in (0, 1)")
    if n_terms < 2:
        raise ValueError("n_terms must be >= 2")
    alpha1 = roulette_alpha(kappa, 1)
    s_prev = alpha1
    mean_sum = alpha1
    partial = 0.0
    partial_sums: list[float] = []
    mean_partial_sums = [mean_sum]
    verdict = "undetermined"
    prev_term = None
    ratio = None
    for j in range(2, n_terms + 1):
        alpha = roulette_alpha(kappa, j)
        term = 2.0 * alpha * s_prev
        if prev_term:
            ratio = abs(term / prev_term)
        partial += term
        partial_sums.append(partial)
        mean_sum += alpha
        mean_partial_sums.append(mean_sum)
        s_prev += alpha / survival(p, j)
        prev_term = term
        if not math.isfinite(partial) or partial > threshold:
            verdict = "diverges"
            break
        if abs(term) < term_tol:
            verdict = "converges"
            break
    predicted = "diverges" if kappa**2 > 1.0 - p else "converges"
    return RouletteVarianceReport(
        kappa=kappa, p=p, partial_sums=partial_sums, mean_partial_sums=mean_partial_sums,
        verdict=verdict, predicted=predicted, threshold=threshold,
        predicted_growth_rate=kappa**2 / (1.0 - p), observed_growth_rate=ratio,
        terms_evaluated=len(partial_sums) + 1,
        notes=f"diverges when a partial sum exceeds {threshold:g}; converges when |term| < {term_tol:g}",
    )


@dataclass
class RouletteEmpirical:
    kappa: float
    p: float
    target: float
    checkpoints: list[int]
    running_mean: list[float]
    running_var: list[float]
    samples: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        out = asdict(self)
        out.pop("samples")
        return out


def roulette_partial_sums(kappa: float, p: float, n_max: int) -> np.ndarray:
    """``S_n = sum_{j<=n} alpha_j / P(N >= j)`` for n = 0..n_max."""
    s = np.zeros(n_max + 1)
    for j in range(1, n_max + 1):
        s[j] = s[j - 1] + roulette_alpha(kappa, j) / survival(p, j)
    return s


def rr_empirical_variance(kappa: float, p: float, n_samples: int, rng: SeededRng,
                          forced_n: int | None = None) -> RouletteEmpirical:
    """Draw ``S_N`` with ``N ~ Geom(p)`` and track the running mean and variance."""
    if forced_n is not None:
        n = np.full(n_samples, forced_n, dtype=np.int64)
    else:
        n = rng.geometric(p, n_samples).numpy()
    table = roulette_partial_sums(kappa, p, int(n.max()))
    samples = table[n]
    checkpoints = sorted({min(n_samples, 10**k) for k in range(1, 1 + int(math.ceil(math.log10(max(n_samples, 10)))))})
    means = [float(samples[:k].mean()) for k in checkpoints]
    variances = [float(samples[:k].var(ddof=1)) if k > 1 else 0.0 for k in checkpoints]
    return RouletteEmpirical(kappa, p, math.log(1.0 - kappa), checkpoints, means, variances, samples)
