"""``cifkit`` command-line interface.

Exit codes: 0 success, 2 configuration or flag error, 3 data or checkpoint
error, 4 numeric abort. JSON and CSV floats are written with 17 significant
digits so they round-trip exactly.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import torch

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, dump_config, load_config
from .diagnostics import (
    density_grid,
    empirical_bilip,
    flow_bijection,
    resflow_bilip_bound,
    rr_empirical_variance,
    rr_variance_lower_bound,
)
from .numcore import DTYPE, SeededRng
from .training import DataError, NumericAbort, dataset_generate, evaluate, load_splits, read_csv_matrix, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def fmt_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps(obj) -> str:
    """Compact JSON with floats at 17 significant digits; key order preserved."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, float):
        return fmt_float(obj)
    if isinstance(obj, torch.Tensor) and obj.numel() == 1:
        return fmt_float(float(obj))
    raise TypeError(f"cannot serialise {type(obj).__name__}")


class UsageError(ValueError):
    pass


def _write_csv(path: str, header: list[str], rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(fmt_float(float(v)) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _load(path: str) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: embedded config invalid: {exc}") from exc


def _resolve_data(source: str, ckpt: Checkpoint) -> torch.Tensor:
    """``train|val|test`` (the checkpoint's own splits), ``synthetic:NAME:N:SEED`` or a CSV path."""
    if source in ("train", "val", "test"):
        x = getattr(load_splits(ckpt.config), source)
    elif source.startswith("synthetic:"):
        parts = source.split(":")
        if len(parts) != 4:
            raise DataError("synthetic data source must be synthetic:NAME:N:SEED")
        try:
            n, seed = int(parts[2]), int(parts[3])
        except ValueError:
            raise DataError(f"bad synthetic data source {source!r}") from None
        x = dataset_generate(parts[1], n, seed)
    else:
        x = torch.as_tensor(read_csv_matrix(source), dtype=DTYPE)
        if ckpt.mean is not None:
            if x.shape[1] != ckpt.dim:
                raise DataError(f"data has {x.shape[1]} columns, model expects {ckpt.dim}")
            x = (x - ckpt.mean) / ckpt.std
    if x.shape[1] != ckpt.dim:
        raise DataError(f"data has {x.shape[1]} columns, model expects {ckpt.dim}")
    return x


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config.json").write_text(dump_config(cfg))
    data = load_splits(cfg)
    metrics_path = out / "metrics.jsonl"
    with metrics_path.open("w") as fh:
        def log_epoch(epoch, model, record):
            fh.write(dumps(record) + "\n")
            fh.flush()

        result = train(cfg, data, on_epoch=log_epoch)
    save_checkpoint(out / "checkpoint.json", cfg, result.model, data.mean, data.std)
    print(dumps({"best_epoch": result.best_epoch, "best_val_ll": result.best_val_ll, "output_dir": str(out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.m < 1:
        raise UsageError("--m must be >= 1")
    ckpt = _load(args.checkpoint)
    x = _resolve_data(args.data, ckpt)
    result = evaluate(ckpt.model, x, args.m, SeededRng(args.seed))
    print(dumps(result.as_dict()))
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    ckpt = _load(args.checkpoint)
    with torch.no_grad():
        x = ckpt.model.sample(args.n, SeededRng(args.seed))
    if ckpt.mean is not None:
        x = x * ckpt.std + ckpt.mean
    _write_csv(args.out, [f"x{i + 1}" for i in range(ckpt.dim)], x.tolist())
    return EXIT_OK


def _parse_bounds(text: str) -> list[float]:
    try:
        bounds = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--bounds must be four comma-separated numbers, got {text!r}") from None
    if len(bounds) != 4 or bounds[0] >= bounds[1] or bounds[2] >= bounds[3]:
        raise UsageError("--bounds must be x1_lo,x1_hi,x2_lo,x2_hi with lo < hi")
    return bounds


def cmd_density_grid(args) -> int:
    bounds = _parse_bounds(args.bounds)
    if args.resolution < 2 or args.m < 1:
        raise UsageError("--resolution must be >= 2 and --m >= 1")
    ckpt = _load(args.checkpoint)
    if ckpt.dim != 2:
        raise DataError(f"density grids need a 2-D model, checkpoint has d = {ckpt.dim}")
    grid = density_grid(ckpt.model, bounds, args.resolution, args.m, SeededRng(args.seed))
    rows = [(a, b, grid.log_density[i, j]) for i, a in enumerate(grid.x1) for j, b in enumerate(grid.x2)]
    _write_csv(args.out, ["x1", "x2", "log_density"], rows)
    return EXIT_OK


def cmd_bilip(args) -> int:
    if args.pairs < 1 or args.points < 2:
        raise UsageError("--pairs must be >= 1 and --points >= 2")
    ckpt = _load(args.checkpoint)
    model_cfg = ckpt.config.model
    bound = None
    if model_cfg.type == "resflow" and not model_cfg.actnorm:
        bound = resflow_bilip_bound(model_cfg.kappa, model_cfg.layers)

    def sampler(n, rng):
        with torch.no_grad():
            return ckpt.model.sample(n, rng)

    report = empirical_bilip(flow_bijection(ckpt.model), sampler, args.points, args.pairs,
                             SeededRng(args.seed), theoretical_bound=bound)
    text = dumps(report.as_dict())
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_rr_lab(args) -> int:
    if not (0 < args.kappa < 1 and 0 < args.p < 1):
        raise UsageError("--kappa and --p must lie in (0, 1)")
    if args.n_terms < 2 or args.n_samples < 2:
        raise UsageError("--n-terms and --n-samples must be >= 2")
    bound = rr_variance_lower_bound(args.kappa, args.p, args.n_terms)
    emp = rr_empirical_variance(args.kappa, args.p, args.n_samples, SeededRng(args.seed))
    doc = {"lower_bound": bound.as_dict(), "empirical": emp.as_dict()}
    if args.out:
        Path(args.out).write_text(dumps(doc) + "\n")
    print(dumps({"verdict": bound.verdict, "predicted": bound.predicted,
                 "terms_evaluated": bound.terms_evaluated, "final_mean": emp.running_mean[-1],
                 "final_var": emp.running_var[-1], "target_mean": emp.target}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cifkit", description="Continuously indexed flows and baselines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", default=None, help="override output_dir from the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean log-likelihood of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="test", help="train|val|test, synthetic:NAME:N:SEED or a CSV path")
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw samples to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("density-grid", help="log-density on a regular 2-D grid to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bounds", default="-4,4,-4,4")
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_density_grid)

    p = sub.add_parser("bilip", help="empirical bi-Lipschitz lower bound of the flow")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", type=int, default=10000)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bilip)

    p = sub.add_parser("rr-lab", help="Russian-roulette variance series and sampling")
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--n-terms", type=int, default=200)
    p.add_argument("--n-samples", type=int, default=100000)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rr_lab)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG if args.command == "train" else EXIT_DATA
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {dumps(exc.record)}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
