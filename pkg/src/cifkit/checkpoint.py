"""Versioned, bit-exact model checkpoints.

File layout (UTF-8 JSON, keys in this order)::

    {"format": "cifkit-checkpoint", "version": 1,
     "config": {...resolved TrainConfig...},
     "dim": d,
     "standardization": null | {"mean": [...], "std": [...]},
     "tensors": [{"name": str, "shape": [int, ...], "dtype": str, "data": hex}, ...]}

``data`` is the little-endian IEEE-754 float64 encoding of the flattened
tensor (row-major), hex encoded. Non-float buffers are stored as float64 and
cast back to their registered dtype on load.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .cif import DensityModel
from .config import TrainConfig, config_from_dict
from .models import build_model
from .numcore import DTYPE, SeededRng

FORMAT = "cifkit-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, incompatible or corrupt checkpoint."""


@dataclass
class Checkpoint:
    config: TrainConfig
    model: DensityModel
    dim: int
    mean: torch.Tensor | None = None
    std: torch.Tensor | None = None


def _encode(t: torch.Tensor) -> str:
    return t.detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes().hex()


def _decode(hex_data: str, shape: list[int]) -> torch.Tensor:
    arr = np.frombuffer(bytes.fromhex(hex_data), dtype="<f8")
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"payload size {arr.size} does not match shape {shape}")
    return torch.from_numpy(arr.astype(np.float64).reshape(shape))


def checkpoint_dict(config: TrainConfig, model: DensityModel, mean=None, std=None) -> dict:
    tensors = [
        {"name": name, "shape": list(t.shape), "dtype": str(t.dtype).removeprefix("torch."), "data": _encode(t)}
        for name, t in model.state_dict().items()
    ]
    standardization = None
    if mean is not None:
        standardization = {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}
    return {"format": FORMAT, "version": VERSION, "config": config.to_dict(), "dim": int(model.dim),
            "standardization": standardization, "tensors": tensors}


def save_checkpoint(path: str | Path, config: TrainConfig, model: DensityModel, mean=None, std=None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(config, model, mean, std), indent=1) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')!r}")
    config = config_from_dict(doc["config"])
    dim = int(doc["dim"])
    model = build_model(config.model, dim, SeededRng(config.seed).child(0))
    reference = model.state_dict()
    names = [entry["name"] for entry in doc["tensors"]]
    if sorted(names) != sorted(reference):
        missing = sorted(set(reference) - set(names))
        extra = sorted(set(names) - set(reference))
        raise CheckpointError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
    state = {}
    for entry in doc["tensors"]:
        ref = reference[entry["name"]]
        if list(ref.shape) != entry["shape"]:
            raise CheckpointError(f"{path}: shape mismatch for {entry['name']}")
        state[entry["name"]] = _decode(entry["data"], entry["shape"]).to(ref.dtype)
    model.load_state_dict(state)
    model.eval()
    std_block = doc.get("standardization")
    mean = std = None
    if std_block:
        mean = torch.tensor(std_block["mean"], dtype=DTYPE)
        std = torch.tensor(std_block["std"], dtype=DTYPE)
    return Checkpoint(config, model, dim, mean, std)
