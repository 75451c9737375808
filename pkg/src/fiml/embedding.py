"""Toy trainable embeddings producing spatial feature blocks.

Each input vector is split into ``locations`` equal cells; a shared map
(identity, affine, or two-layer MLP) turns every cell into an F-channel
feature, yielding a [batch, locations, F] block. Stands in for the heavy
convolutional backbones this pipeline would use at full scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import philox

__all__ = ["EmbeddingConfig", "init_embedding", "embedding_nodes", "embed", "spatial_mean"]

_INIT_STREAM = 0x656D6264  # "embd"


@dataclass(frozen=True)
class EmbeddingConfig:
    kind: str = "linear"  # identity | linear | mlp2
    input_dim: int = 32
    locations: int = 4
    features: int = 16
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in ("identity", "linear", "mlp2"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if self.locations < 1 or self.input_dim < 1:
            raise ValueError("need input_dim >= 1 and locations >= 1")
        if self.input_dim % self.locations != 0:
            raise ValueError(f"input_dim {self.input_dim} not divisible by locations {self.locations}")
        if self.kind == "identity" and self.features != self.cell_dim:
            raise ValueError(f"identity embedding requires features == input_dim/locations == {self.cell_dim}")

    @property
    def cell_dim(self) -> int:
        return self.input_dim // self.locations


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_embedding(cfg: EmbeddingConfig, seed: int) -> dict:
    """Seeded uniform(+-1/sqrt(fan_in)) parameter init."""
    rng = philox(seed, _INIT_STREAM)
    cd = cfg.cell_dim
    if cfg.kind == "identity":
        return {}
    if cfg.kind == "linear":
        return {"w": _uniform(rng, (cd, cfg.features), cd), "b": _uniform(rng, (cfg.features,), cd)}
    return {
        "w1": _uniform(rng, (cd, cfg.hidden), cd),
        "b1": _uniform(rng, (cfg.hidden,), cd),
        "w2": _uniform(rng, (cfg.hidden, cfg.features), cfg.hidden),
        "b2": _uniform(rng, (cfg.features,), cfg.hidden),
    }


def embedding_nodes(tape: ad.Tape, params: dict, learnable: bool = False) -> dict:
    """Put embedding parameters on a tape as leaves."""
    return {name: tape.leaf(value, requires_grad=learnable) for name, value in params.items()}


def embed(tape: ad.Tape, cfg: EmbeddingConfig, param_nodes: dict, x: np.ndarray) -> ad.Node:
    """Map a raw [batch, dim] array to a [batch, L, F] feature block node."""
    x = np.asarray(x, dtype=tape.dtype)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ad.ShapeError(f"embed expects [batch, {cfg.input_dim}] inputs, got {x.shape}")
    batch = x.shape[0]
    cells = tape.constant(x.reshape(batch * cfg.locations, cfg.cell_dim))
    if cfg.kind == "identity":
        return ad.reshape(cells, (batch, cfg.locations, cfg.features))
    if cfg.kind == "linear":
        h = ad.matmul(cells, param_nodes["w"])
        h = ad.add(h, ad.expand_rows(param_nodes["b"], batch * cfg.locations))
        return ad.reshape(h, (batch, cfg.locations, cfg.features))
    h = ad.matmul(cells, param_nodes["w1"])
    h = ad.relu(ad.add(h, ad.expand_rows(param_nodes["b1"], batch * cfg.locations)))
    h = ad.matmul(h, param_nodes["w2"])
    h = ad.add(h, ad.expand_rows(param_nodes["b2"], batch * cfg.locations))
    return ad.reshape(h, (batch, cfg.locations, cfg.features))


def spatial_mean(block: ad.Node) -> ad.Node:
    """Mean over the location axis: [batch, L, F] -> [batch, F]."""
    if block.value.ndim != 3:
        raise ad.ShapeError(f"spatial_mean expects [batch, L, F], got {block.shape}")
    return ad.reduce_mean(block, axis=1)
