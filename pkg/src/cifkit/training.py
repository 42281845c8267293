"""Data generation and ingestion, Adam, evaluation and the early-stopping training loop."""
from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .bijections import actnorm_init_mode
from .cif import DensityModel
from .config import DataConfig, TrainConfig
from .models import build_model, count_parameters
from .numcore import DTYPE, NonFiniteError, SeededRng, backward, param_store

DEFAULT_DATASET_PARAMS = {
    "two_uniform_squares": {"low": 1.0, "high": 2.0},
    "annulus": {"r_min": 1.0, "r_max": 2.0},
    "two_spirals": {"noise": 0.1, "turns": 1.5},
    "checkerboard": {"cells": 4.0, "half_width": 2.0},
}


class DataError(ValueError):
    """Unreadable or malformed input data."""


class NumericAbort(FloatingPointError):
    """Training hit a non-finite loss or validation score; ``record`` holds the diagnostic."""

    def __init__(self, record: dict):
        where = f"batch {record['batch']}" if "batch" in record else "validation"
        super().__init__(f"non-finite value at epoch {record['epoch']} ({where})")
        self.record = record


# ---------------------------------------------------------------------------
# Data


@dataclass
class SplitData:
    train: torch.Tensor
    val: torch.Tensor
    test: torch.Tensor
    mean: torch.Tensor | None = None
    std: torch.Tensor | None = None

    @property
    def dim(self) -> int:
        return self.train.shape[1]

    def standardize(self, x: torch.Tensor) -> torch.Tensor:
        if self.mean is None:
            return x
        return (x - self.mean) / self.std


def dataset_generate(name: str, n: int, seed: int, params: dict | None = None) -> torch.Tensor:
    """Seeded 2-D samples from one of the synthetic targets."""
    if name not in DEFAULT_DATASET_PARAMS:
        raise DataError(f"unknown dataset {name!r}")
    if n < 1:
        raise DataError("n must be >= 1")
    opts = {**DEFAULT_DATASET_PARAMS[name], **(params or {})}
    rng = np.random.default_rng(seed)
    if name == "two_uniform_squares":
        side = rng.uniform(opts["low"], opts["high"], size=(n, 2))
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)[:, None]
        x = side * sign
    elif name == "annulus":
        r = rng.uniform(opts["r_min"], opts["r_max"], size=n)
        theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
        x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    elif name == "two_spirals":
        angle = np.sqrt(rng.random(n)) * opts["turns"] * 2.0 * math.pi
        arm = np.stack([-np.cos(angle) * angle, np.sin(angle) * angle], axis=1) / 3.0
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)[:, None]
        x = arm * sign + opts["noise"] * rng.standard_normal((n, 2))
    else:
        cells = int(opts["cells"])
        half = opts["half_width"]
        width = 2.0 * half / cells
        black = [(i, j) for i in range(cells) for j in range(cells) if (i + j) % 2 == 0]
        pick = rng.integers(len(black), size=n)
        corner = np.array([black[k] for k in pick], dtype=np.float64) * width - half
        x = corner + width * rng.random((n, 2))
    return torch.as_tensor(x, dtype=DTYPE)


def synthetic_splits(cfg: DataConfig, seed: int) -> SplitData:
    base = cfg.seed if cfg.seed is not None else seed
    return SplitData(
        train=dataset_generate(cfg.name, cfg.n_train, base * 3 + 0, cfg.params),
        val=dataset_generate(cfg.name, cfg.n_val, base * 3 + 1, cfg.params),
        test=dataset_generate(cfg.name, cfg.n_test, base * 3 + 2, cfg.params),
    )


def read_csv_matrix(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    header, body = rows[0], rows[1:]
    out = np.empty((len(body), len(header)), dtype=np.float64)
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{i}: ragged row ({len(row)} cells, header has {len(header)})")
        for j, cell in enumerate(row):
            try:
                out[i - 2, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}:{i}: non-numeric cell {cell!r}") from None
    if not np.isfinite(out).all():
        raise DataError(f"{path}: non-finite values")
    return out


def csv_load_standardize(path: str | Path, split_fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitData:
    """Shuffle rows with ``seed``, split by fractions and standardise with train moments."""
    data = read_csv_matrix(path)
    n = data.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(split_fractions[0] * n + 1e-9))
    n_val = int(math.floor(split_fractions[1] * n + 1e-9))
    if n_train < 1 or n - n_train - n_val < 1:
        raise DataError(f"{path}: too few rows ({n}) for the requested split")
    shuffled = torch.as_tensor(data[order], dtype=DTYPE)
    train = shuffled[:n_train]
    mean = train.mean(0)
    std = train.std(0, unbiased=False)
    std = torch.where(std > 0, std, torch.ones_like(std))
    split = SplitData(train, shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:], mean, std)
    split.train = split.standardize(split.train)
    split.val = split.standardize(split.val)
    split.test = split.standardize(split.test)
    return split


def load_splits(cfg: TrainConfig) -> SplitData:
    d = cfg.data
    if d.source == "csv":
        data_seed = d.seed if d.seed is not None else cfg.seed
        return csv_load_standardize(d.path, tuple(d.split_fractions), data_seed)
    return synthetic_splits(d, cfg.seed)


# ---------------------------------------------------------------------------
# Optimiser


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, torch.Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {k: torch.zeros_like(p) for k, p in params.items()}
        state.v = {k: torch.zeros_like(p) for k, p in params.items()}
        return state


@torch.no_grad()
def adam_step(state: AdamState, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              lr: float | None = None) -> dict[str, torch.Tensor]:
    """One bias-corrected Adam update (descent on the loss), in place."""
    if set(grads) != set(params):
        raise ValueError("gradients are not aligned with parameters")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {tuple(g.shape)} vs {tuple(p.shape)}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m[name].mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v = state.v[name].mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalResult:
    mean_ll: float
    stderr: float
    n: int
    m: int
    values: torch.Tensor

    def as_dict(self) -> dict:
        return {"mean_ll": self.mean_ll, "stderr": self.stderr, "n": self.n, "m": self.m}


def evaluate(model: DensityModel, x: torch.Tensor, m: int, rng: SeededRng, batch_size: int = 1000) -> EvalResult:
    """Mean log-likelihood over ``x``: IS with ``m`` draws for CIFs, exact for flows."""
    if m < 1:
        raise ValueError("m must be >= 1")
    values = []
    with torch.no_grad():
        for b, start in enumerate(range(0, x.shape[0], batch_size)):
            values.append(model.log_likelihood(x[start:start + batch_size], m, rng.child(b)))
    vals = torch.cat(values)
    n = vals.numel()
    stderr = float(vals.std(unbiased=True) / math.sqrt(n)) if n > 1 else 0.0
    return EvalResult(float(vals.mean()), stderr, n, m, vals)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: DensityModel
    metrics: list[dict]
    best_epoch: int
    best_val_ll: float
    best_state: dict[str, torch.Tensor]


EpochCallback = Callable[[int, DensityModel, dict], None]


def train(config: TrainConfig, data: SplitData, on_epoch: EpochCallback | None = None,
          model: DensityModel | None = None) -> TrainResult:
    """Maximise the mean ELBO (CIFs) or exact log-likelihood (flows) with early stopping.

    Returns the model loaded with its best-validation parameters.
    """
    if min(data.train.shape[0], data.val.shape[0]) < 1:
        raise DataError("train and validation splits must be non-empty")
    opt = config.optimiser
    rng = SeededRng(config.seed)
    if model is None:
        model = build_model(config.model, data.dim, rng.child(0))
    shuffle_rng, noise_rng = rng.child(1), rng.child(2)
    eval_rng = SeededRng(config.eval.eval_seed)

    if config.model.actnorm:
        with actnorm_init_mode(), torch.no_grad():
            model.objective(data.train[: min(len(data.train), opt.batch_size)], noise_rng.child(0))

    params = param_store(model)
    adam = AdamState.for_params(params, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
                                weight_decay=opt.weight_decay)
    n_params = count_parameters(model)
    x_train = data.train
    n = x_train.shape[0]

    metrics: list[dict] = []
    best_val = -math.inf
    best_epoch = 0
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0
    start = time.perf_counter()

    for epoch in range(1, opt.max_epochs + 1):
        model.train()
        perm = shuffle_rng.child(epoch).permutation(n)
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, n, opt.batch_size)):
            batch = x_train[perm[lo:lo + opt.batch_size]]
            try:
                obj = model.objective(batch, noise_rng.child(epoch).child(b))
            except NonFiniteError as exc:
                raise NumericAbort({"epoch": epoch, "batch": b, "loss": math.nan, "error": str(exc)}) from exc
            loss = -obj.mean()
            if not bool(torch.isfinite(loss)):
                raise NumericAbort({"epoch": epoch, "batch": b, "loss": float(loss),
                                    "n_nonfinite": int((~torch.isfinite(obj)).sum())})
            grads = backward(loss, params)
            adam_step(adam, params, grads)
            total += float(obj.sum().detach())
            count += batch.shape[0]

        model.eval()
        try:
            val = evaluate(model, data.val, config.eval.m_val, eval_rng).mean_ll
        except NonFiniteError as exc:
            val, error = math.nan, str(exc)
        else:
            error = "non-finite validation log-likelihood"
        if not math.isfinite(val):
            raise NumericAbort({"epoch": epoch, "val_ll": val, "error": error})
        if val > best_val:
            best_val, best_epoch, since_best = val, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
        record = {
            "epoch": epoch,
            "train_elbo": total / count,
            "val_ll": val,
            "best_val_ll": best_val,
            "wall_time_s": round(time.perf_counter() - start, 3) if config.eval.record_wall_time else None,
            "param_count": n_params,
        }
        metrics.append(record)
        if on_epoch is not None:
            on_epoch(epoch, model, record)
        if since_best >= opt.patience:
            break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, metrics, best_epoch, best_val, best_state)
