"""Run configuration: nested dataclasses parsed from JSON with unknown-key rejection."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

ARCHITECTURES = (
    "resflow", "maf", "coupling",
    "cif-resflow", "cif-maf", "cif-coupling", "cif-id",
)
DATASETS = ("two_uniform_squares", "annulus", "two_spirals", "checkerboard")
HEAD_MODES = ("trainable", "zeroed", "zeroed-frozen")


class ConfigError(ValueError):
    """Invalid run configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class NetSizes:
    """``[width, depth]`` per network. ``coupler`` sizes the base-layer network of
    every architecture (coupling net, MADE conditioner or residual g)."""

    coupler: list[int] = field(default_factory=lambda: [128, 4])
    nn_F: list[int] = field(default_factory=lambda: [10, 2])
    nn_p: list[int] = field(default_factory=lambda: [10, 2])
    nn_q: list[int] = field(default_factory=lambda: [10, 2])


@dataclass
class LogDetSettings:
    mode: str = "exact"
    p: float = 0.5
    k_exact_train: int = 2
    k_exact_test: int = 20
    k: int = 10
    hutchinson: bool = False


@dataclass
class ModelConfig:
    type: str = "cif-resflow"
    layers: int = 10
    kappa: float = 0.9
    d_u: int | None = None
    variant: int = 3
    actnorm: bool = False
    heads: str = "trainable"
    nets: NetSizes = field(default_factory=NetSizes)
    logdet: LogDetSettings = field(default_factory=LogDetSettings)

    @property
    def is_cif(self) -> bool:
        return self.type.startswith("cif-")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 256
    max_epochs: int = 1000
    patience: int = 50


@dataclass
class DataConfig:
    source: str = "synthetic"
    name: str = "two_uniform_squares"
    n_train: int = 10000
    n_val: int = 2000
    n_test: int = 5000
    seed: int | None = None
    params: dict[str, float] = field(default_factory=dict)
    path: str | None = None
    split_fractions: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class EvalConfig:
    m_val: int = 5
    m_test: int = 100
    eval_seed: int = 12345
    record_wall_time: bool = False


@dataclass
class TrainConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    optimiser: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def validate(self) -> "TrainConfig":
        m, o, d, e = self.model, self.optimiser, self.data, self.eval
        checks = [
            ("model.type", m.type in ARCHITECTURES, f"must be one of {ARCHITECTURES}"),
            ("model.layers", m.layers >= 1, "must be >= 1"),
            ("model.kappa", 0.0 < m.kappa < 1.0, "must lie in (0, 1)"),
            ("model.d_u", m.d_u is None or m.d_u >= 1, "must be >= 1"),
            ("model.variant", m.variant in (1, 2, 3), "must be 1, 2 or 3"),
            ("model.heads", m.heads in HEAD_MODES, f"must be one of {HEAD_MODES}"),
            ("model.logdet.mode", m.logdet.mode in ("exact", "truncated", "roulette"),
             "must be exact, truncated or roulette"),
            ("model.logdet.p", 0.0 < m.logdet.p < 1.0, "must lie in (0, 1)"),
            ("optimiser.lr", o.lr > 0, "must be positive"),
            ("optimiser.batch_size", o.batch_size >= 1, "must be >= 1"),
            ("optimiser.max_epochs", o.max_epochs >= 1, "must be >= 1"),
            ("optimiser.patience", o.patience >= 1, "must be >= 1"),
            ("data.source", d.source in ("synthetic", "csv"), "must be synthetic or csv"),
            ("data.name", d.source != "synthetic" or d.name in DATASETS, f"must be one of {DATASETS}"),
            ("data.path", d.source != "csv" or bool(d.path), "required for csv data"),
            ("data.split_fractions", len(d.split_fractions) == 3 and abs(sum(d.split_fractions) - 1) < 1e-9,
             "must be three fractions summing to 1"),
            ("eval.m_val", e.m_val >= 1, "must be >= 1"),
            ("eval.m_test", e.m_test >= 1, "must be >= 1"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(name, message)
        for name in ("coupler", "nn_F", "nn_p", "nn_q"):
            size = getattr(m.nets, name)
            if len(size) != 2 or min(size) < 1:
                raise ConfigError(f"model.nets.{name}", "must be [width, depth] with positive entries")
        return self


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", "expected a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        key = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(key, "unknown key")
    kwargs = {}
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        else:
            kwargs[name] = _coerce(value, fields[name], default, key)
    return cls(**kwargs)


def _coerce(value, f: dataclasses.Field, default, key: str):
    expected = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if value is None:
        if "None" in expected:
            return None
        raise ConfigError(key, "must not be null")
    if expected.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(key, "must be a boolean")
    elif expected.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, "must be an integer")
    elif expected.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, "must be a number")
        value = float(value)
    elif expected.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(key, "must be a string")
    elif expected.startswith("list"):
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(key, "must be a list of numbers")
        if isinstance(default, list) and default and all(isinstance(v, int) for v in default):
            if not all(isinstance(v, int) for v in value):
                raise ConfigError(key, "must be a list of integers")
        else:
            value = [float(v) for v in value]
    elif expected.startswith("dict"):
        if not isinstance(value, dict):
            raise ConfigError(key, "must be an object")
    return value


def config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, "").validate()


def load_config(path: str | Path) -> TrainConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)


def dump_config(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=False) + "\n"
