"""Model construction from a ``ModelConfig``.

Each base layer ``f_i`` is initialised from its own RNG stream, independent of
the CIF heads, so a CIF and its baseline flow built with the same seed share
identical ``f`` parameters.
"""
from __future__ import annotations

from .bijections import ActNorm, AffineCoupling, Bijection, Compose, LogDetConfig, MaskedAutoregressive, ResidualBlock
from .cif import CifStack, DensityModel, Flow, default_index_dim, make_cif_id_layer, make_cif_layer
from .config import ModelConfig
from .numcore import SeededRng, seeded_torch


def _logdet_config(cfg: ModelConfig) -> LogDetConfig:
    ld = cfg.logdet
    return LogDetConfig(mode=ld.mode, k=ld.k, p=ld.p, k_exact_train=ld.k_exact_train,
                        k_exact_test=ld.k_exact_test, hutchinson=ld.hutchinson)


def coupling_mask(dim: int, flip: bool) -> list[int]:
    half = dim // 2
    mask = [1 if i < half else 0 for i in range(dim)]
    return [1 - m for m in mask] if flip else mask


def make_base_layer(cfg: ModelConfig, dim: int, index: int) -> Bijection:
    width, depth = cfg.nets.coupler
    kind = cfg.type.removeprefix("cif-")
    if kind == "resflow":
        block = ResidualBlock(dim, width, depth, cfg.kappa, _logdet_config(cfg))
        if cfg.actnorm:
            return Compose([ActNorm(dim), block])
        return block
    if kind == "maf":
        return MaskedAutoregressive(dim, width, depth, reverse=bool(index % 2))
    if kind == "coupling":
        if dim < 2:
            raise ValueError("coupling layers need d >= 2")
        return AffineCoupling(dim, coupling_mask(dim, bool(index % 2)), width, depth)
    raise ValueError(f"no base layer for architecture {cfg.type!r}")


def build_model(cfg: ModelConfig, dim: int, rng: SeededRng) -> DensityModel:
    base_rng, head_rng = rng.child(0), rng.child(1)
    d_u = cfg.d_u
    if cfg.type == "cif-id":
        d_u = d_u or dim
        layers = []
        for i in range(cfg.layers):
            with seeded_torch(head_rng.child(i)):
                layers.append(make_cif_id_layer(dim, d_u, cfg.variant, cfg.nets.nn_F, cfg.nets.nn_p, cfg.nets.nn_q))
        model: DensityModel = CifStack(layers, dim)
    else:
        bases = []
        for i in range(cfg.layers):
            with seeded_torch(base_rng.child(i)):
                bases.append(make_base_layer(cfg, dim, i))
        if not cfg.is_cif:
            return Flow(bases, dim)
        d_u = d_u or default_index_dim(dim)
        layers = []
        for i, f in enumerate(bases):
            with seeded_torch(head_rng.child(i)):
                layers.append(make_cif_layer(f, d_u, cfg.nets.nn_F, cfg.nets.nn_p, cfg.nets.nn_q))
        model = CifStack(layers, dim)
    if cfg.heads in ("zeroed", "zeroed-frozen"):
        model.zero_heads()
    if cfg.heads == "zeroed-frozen":
        model.freeze_heads()
    return model


def count_parameters(model) -> int:
    return sum(p.numel() for p in model.parameters())
